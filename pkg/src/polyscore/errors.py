"""Exception hierarchy shared across the package."""


class PolyscoreError(Exception):
    """Base class for all package errors."""


class ShapeError(PolyscoreError):
    """Tensor or layer geometry is inconsistent."""


class FoldError(PolyscoreError):
    """Batch-norm folding is impossible for this layer arrangement."""


class ConversionError(PolyscoreError):
    """Network contains a layer kind with no polynomial counterpart."""


class QuantizationError(PolyscoreError):
    """Codebook fitting or application failed."""


class TrainingDiverged(PolyscoreError):
    """Loss became non-finite during training."""

    def __init__(self, phase: str, epoch: int):
        self.phase = phase
        self.epoch = epoch
        super().__init__(f"loss diverged in phase {phase!r} at epoch {epoch}")


class ParameterError(PolyscoreError):
    """Invalid or infeasible encryption parameters."""


class EncodingOverflow(PolyscoreError):
    """Fixed-point value does not fit the plaintext modulus."""


class NoiseBudgetExhausted(PolyscoreError):
    """Ciphertext noise leaves no headroom for correct decryption."""


class DecryptionIntegrityError(PolyscoreError):
    """Decryption produced corrupted plaintext (noise overflow detected)."""


class ProtocolError(PolyscoreError):
    """Wire-protocol violation (bad frame, bad sequence, replay, mismatch)."""


class TransportError(PolyscoreError):
    """Transport-level failure (truncation, closed stream)."""


class ManifestError(PolyscoreError):
    """Model manifest or sidecar file is malformed."""
