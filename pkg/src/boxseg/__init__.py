"""boxseg: box-supervised segmentation with shape-decoupled dice and
contrastive latent anchors, on a minimal float64 autodiff engine."""

__version__ = "0.1.0"
