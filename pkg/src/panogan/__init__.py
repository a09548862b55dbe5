"""Progressive-GAN anomaly detection on image patches.

Train a progressive GAN on normal patches, fit an encoder against the frozen
generator and critic, then score query patches by how badly they reconstruct.
"""

__version__ = "0.1.0"
