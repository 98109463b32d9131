"""EV charging scenario generation with a denoising diffusion model."""
