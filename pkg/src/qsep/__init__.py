"""Query-conditioned sound separation: STFT masking U-Net, multi-modal queries, synthetic benchmark."""

__version__ = "0.1.0"
