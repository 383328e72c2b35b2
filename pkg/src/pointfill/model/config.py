from __future__ import annotations

from dataclasses import asdict, dataclass, fields


@dataclass
class ModelConfig:
    """Sizes of the completion transformer.

    Defaults are the desk-scale setting (1024 points in, 512 out). The
    full-scale budget is ``group_in=32768, group_out=16384``.
    """

    group_in: int = 1024
    group_out: int = 512
    n_proxies: int = 128
    feat_dim: int = 128
    n_enc_blocks: int = 2
    n_dec_blocks: int = 2
    n_heads: int = 4
    knn_k: int = 8
    n_queries: int = 8
    fold_seed: int = 4
    fold_radius: float = 0.05
    ffn_mult: int = 2
    n_freq: int = 6

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "fold_radius":
                if not value > 0:
                    raise ValueError("fold_radius must be > 0")
            elif f.name in ("n_enc_blocks", "n_dec_blocks"):
                if int(value) != value or value < 0:
                    raise ValueError(f"{f.name} must be a non-negative integer")
            elif int(value) != value or value < 1:
                raise ValueError(f"{f.name} must be a positive integer, got {value!r}")
        if self.n_queries * self.fold_seed**3 != self.group_out:
            raise ValueError(
                f"n_queries * fold_seed**3 = {self.n_queries * self.fold_seed**3} "
                f"must equal group_out = {self.group_out}"
            )
        if self.feat_dim % self.n_heads:
            raise ValueError("feat_dim must be divisible by n_heads")
        if self.n_proxies > self.group_in:
            raise ValueError("n_proxies cannot exceed group_in")
        if self.knn_k > self.group_in or self.knn_k > self.n_proxies:
            raise ValueError("knn_k cannot exceed group_in or n_proxies")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)
