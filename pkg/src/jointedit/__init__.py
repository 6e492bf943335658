"""jointedit: joint camera + LiDAR scene editing with dual-branch latent
diffusion, trained and evaluated end to end on procedurally ray-cast scenes."""

__version__ = "0.1.0"

CHECKPOINT_FORMAT_VERSION = 1
