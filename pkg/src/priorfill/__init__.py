"""priorfill: desk-scale image inpainting with masked-autoencoder priors."""

__version__ = "0.1.0"
