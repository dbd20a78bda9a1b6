from __future__ import annotations

from dataclasses import asdict, dataclass, fields

GENERATOR_LOSSES = ("non_saturating", "minimax")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and training hyperparameters.

    ``theta_e_dims`` must end in ``2 * z_dim`` (mean half, then log-sigma
    half); ``theta_d_dims[0] - z_dim`` is the size of the compressed
    trajectory code shared by the CVAE encoder and decoder.
    """

    noise_dim: int = 32
    enc_hidden: int = 64
    dec_hidden: int = 128
    embed_dim: int = 64
    batch: int = 256
    z_dim: int = 16
    alpha_test: float = 3.0
    lambda1: float = 0.5
    lambda2: float = 1.0
    lambda3: float = 0.5
    k_samples: int = 20
    oversample: int = 1000
    psi_dims: tuple = (64, 1024, 1)
    theta_g_dims: tuple = (2, 8, 16, 16)
    theta_e_dims: tuple = (32, 8, 50, 32)
    theta_d_dims: tuple = (32, 1024, 512, 1024, 2)
    m_bins: int = 4
    lr: float = 0.0005
    use_cvae: bool = True
    augment: bool = True
    generator_loss: str = "non_saturating"

    def __post_init__(self):
        for name in ("psi_dims", "theta_g_dims", "theta_e_dims", "theta_d_dims"):
            object.__setattr__(self, name, tuple(int(d) for d in getattr(self, name)))
        ints = ("noise_dim", "enc_hidden", "dec_hidden", "embed_dim", "batch", "z_dim",
                "k_samples", "oversample", "m_bins")
        for name in ints:
            if int(getattr(self, name)) < 1:
                raise ValueError(f"ModelConfig.{name} must be positive")
        dims = self.psi_dims + self.theta_g_dims + self.theta_e_dims + self.theta_d_dims
        if min(dims) < 1:
            raise ValueError("all layer dimensions must be positive")
        if self.psi_dims[0] != self.enc_hidden or self.psi_dims[-1] != 1:
            raise ValueError(f"psi_dims must run from enc_hidden={self.enc_hidden} to 1, got {self.psi_dims}")
        if self.theta_g_dims[0] != 2 or self.theta_d_dims[-1] != 2:
            raise ValueError("theta_g must take a 2D goal and theta_d must emit one")
        if self.theta_e_dims[-1] != 2 * self.z_dim:
            raise ValueError(f"theta_e must emit 2*z_dim={2 * self.z_dim} values, got {self.theta_e_dims[-1]}")
        if self.code_dim < 1:
            raise ValueError("theta_d input must exceed z_dim")
        if self.theta_e_dims[0] != self.theta_g_dims[-1] + self.code_dim:
            raise ValueError(
                f"theta_e input {self.theta_e_dims[0]} != goal embedding {self.theta_g_dims[-1]} "
                f"+ trajectory code {self.code_dim}"
            )
        if self.alpha_test < 0:
            raise ValueError("alpha_test must be non-negative")
        if self.generator_loss not in GENERATOR_LOSSES:
            raise ValueError(f"generator_loss must be one of {GENERATOR_LOSSES}")

    @property
    def code_dim(self) -> int:
        return self.theta_d_dims[0] - self.z_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**values)

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**self.to_dict(), **changes})


# Small dimensions for gradient checks and quick smoke runs; same topology.
TINY = ModelConfig(
    noise_dim=3, enc_hidden=5, dec_hidden=6, embed_dim=4, batch=8, z_dim=2,
    k_samples=3, oversample=10, psi_dims=(5, 7, 1), theta_g_dims=(2, 3, 4),
    theta_e_dims=(7, 5, 4), theta_d_dims=(5, 6, 5, 2),
)
