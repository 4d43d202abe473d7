"""Genre classification from siamese spectrogram embeddings and a complete-graph edge-convolution network."""

__version__ = "0.1.0"
