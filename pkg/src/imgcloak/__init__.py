"""imgcloak: imperceptible image-dataset cloaking via embedding-space
dispersion, plus a desk-scale simulated fine-tuning attacker."""

__version__ = "0.1.0"

from .encoder import EncoderConfig, EncoderParams, embed, init_encoder
from .imageio import Image, load_image, save_image
from .objective import AnchorPair, ObjectiveConfig, cos_sim, make_anchor
from .pgd import PgdConfig, ProtectionResult, protect_image
from .transforms import EotPolicy, TransformSpec

__all__ = [
    "EncoderConfig", "EncoderParams", "embed", "init_encoder",
    "Image", "load_image", "save_image",
    "AnchorPair", "ObjectiveConfig", "cos_sim", "make_anchor",
    "PgdConfig", "ProtectionResult", "protect_image",
    "EotPolicy", "TransformSpec",
    "__version__",
]
