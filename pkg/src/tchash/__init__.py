"""Codec-invariant temporal content hashes for audio-visual archives.

Ingest trains small sequence models on a media file and its transcodes,
hashes every 30 s block to a product-quantised code, and commits the codes to
an append-only authority-sealed ledger. Verification replays the archived
models over a candidate file and flags blocks whose codes moved too far.
"""

__version__ = "0.1.0"

from .errors import TchError
from .media import (
    DegradeParams,
    MediaClip,
    TamperKind,
    TamperSpec,
    load_media,
    save_media,
    synth_clip,
)
from .pipeline import (
    IngestConfig,
    TchBundle,
    TemporalContentHasher,
    Verifier,
    VerifyReport,
    ingest,
    verify,
)

__all__ = [
    "DegradeParams", "IngestConfig", "MediaClip", "TamperKind", "TamperSpec", "TchBundle", "TchError",
    "TemporalContentHasher", "Verifier", "VerifyReport", "__version__", "ingest", "load_media", "save_media",
    "synth_clip", "verify",
]
