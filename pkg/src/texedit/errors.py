"""Exception types shared across the package."""


class TexEditError(Exception):
    pass


class ShapeError(TexEditError, ValueError):
    """Tensor shape or dimension contract violated."""


class ConfigError(TexEditError, ValueError):
    """Invalid or unknown configuration."""


class TransportError(TexEditError, RuntimeError):
    """External HTTP backend unreachable or returned garbage."""


class RegionNotFoundError(TexEditError, RuntimeError):
    """Detection backend produced no box above threshold for the garment."""

    def __init__(self, garment_name: str, message: str = ""):
        self.garment_name = garment_name
        super().__init__(message or f"region not found for garment {garment_name!r}")


class NoExtractableTextureError(TexEditError, RuntimeError):
    """No patch window fits inside the garment mask, even at fallback size."""

    def __init__(self, garment_id: str, message: str = ""):
        self.garment_id = garment_id
        super().__init__(message or f"no extractable texture for garment {garment_id!r}")
