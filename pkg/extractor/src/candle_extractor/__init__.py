"""Bridge from image folders to CNDP feature packs via frozen CLIP-style encoders."""

__version__ = "0.1.0"

from .encoders import ClipStyleEncoder
from .extract import ExtractJob, extract_images, extract_text, run_job

__all__ = ["ClipStyleEncoder", "ExtractJob", "extract_images", "extract_text",
           "run_job", "__version__"]
