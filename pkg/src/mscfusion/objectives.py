"""Contrastive objectives, baseline losses, and their composition.

Four primary losses relate local and global representations within and
across modalities (CR, XX, RR, CC); every non-empty subset of them is a
trainable scheme, and five baseline schemes (supervised cross-entropy,
autoencoding, correlation alignment, and their combinations) reuse the same
composition machinery. All mutual-information terms share one InfoNCE
estimator over a scaled-dot-product critic whose scores are soft-clipped and
penalized quadratically.

Sign convention: the MI terms are maximized in principle, so they enter the
minimized total negated; reconstruction, cross-entropy, and the correlation
term enter positively.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigurationError, NumericError

PRIMARY_TERMS = ("CR", "RR", "XX", "CC")
VALID_TERMS = PRIMARY_TERMS + ("CCA", "AE", "CE")

_BASELINE_NAMES = {
    ("CE",): "Supervised",
    ("AE",): "AE",
    ("CCA", "AE"): "DCCAE",
    ("CR", "CCA"): "CR-CCA",
    ("RR", "AE"): "RR-AE",
}
_MI_PREFIXES = set(PRIMARY_TERMS)


@dataclass(frozen=True)
class CriticConfig:
    """Scaled-dot-product critic with tanh score clipping and a squared-score
    penalty. ``dim`` is the score scale divisor (the critic-space width)."""

    dim: int = 64
    clip: float = 20.0
    penalty_lambda: float = 4e-2
    penalty_positives_only: bool = False

    def validate(self) -> None:
        if self.dim <= 0:
            raise ConfigurationError("critic dim must be > 0")
        if self.clip <= 0:
            raise ConfigurationError("clip must be > 0")
        if self.penalty_lambda < 0:
            raise ConfigurationError("penalty_lambda must be >= 0")


@dataclass(frozen=True)
class ObjectiveSpec:
    """One trainable scheme: a term set plus critic configuration."""

    terms: tuple[str, ...]
    symmetrize: bool = True
    modalities: tuple[str, str] = ("m1", "m2")
    critic: CriticConfig = field(default_factory=CriticConfig)

    def validate(self) -> None:
        if not self.terms:
            raise ConfigurationError("objective needs at least one term")
        unknown = [t for t in self.terms if t not in VALID_TERMS]
        if unknown:
            raise ConfigurationError(
                f"unknown terms {unknown}; valid terms: {', '.join(VALID_TERMS)}"
            )
        if len(set(self.terms)) != len(self.terms):
            raise ConfigurationError("duplicate terms")
        if len(self.modalities) != 2:
            raise ConfigurationError("exactly two modalities are supported")
        self.critic.validate()
        if set(self.terms) == {"CC"}:
            warnings.warn(
                "CC-only training leaves the top of the encoder untrained; "
                "the final layers will behave as a random projection. "
                "Compose CC with another objective for usable global features.",
                UserWarning,
                stacklevel=2,
            )

    @property
    def name(self) -> str:
        return objective_name(self.terms)

    @property
    def contrastive(self) -> bool:
        return bool(set(self.terms) & _MI_PREFIXES)


def objective_name(terms: tuple[str, ...] | list[str]) -> str:
    """Canonical scheme name for a term set (e.g. ("XX","RR") -> "RR-XX")."""
    key = tuple(sorted(terms, key=VALID_TERMS.index))
    if key in _BASELINE_NAMES:
        return _BASELINE_NAMES[key]
    return "-".join(key)


def objective_terms(name: str) -> tuple[str, ...]:
    """Inverse of ``objective_name``; raises with the valid vocabulary."""
    for terms, base in _BASELINE_NAMES.items():
        if name == base:
            return terms
    parts = tuple(name.split("-"))
    if parts and all(p in VALID_TERMS for p in parts) and len(set(parts)) == len(parts):
        return tuple(sorted(parts, key=VALID_TERMS.index))
    raise ConfigurationError(
        f"unknown objective {name!r}; valid schemes: "
        + ", ".join(taxonomy_nodes() + baseline_schemes())
    )


def taxonomy_nodes() -> list[str]:
    """All 15 non-empty subsets of the four primary objectives."""
    names = []
    for mask in range(1, 16):
        terms = tuple(
            t for i, t in enumerate(PRIMARY_TERMS) if mask & (1 << i)
        )
        names.append(objective_name(terms))
    return names


def baseline_schemes() -> list[str]:
    return ["Supervised", "AE", "DCCAE", "CR-CCA", "RR-AE"]


@dataclass
class ModalityOutputs:
    """Per-modality tensors that compose() consumes; fields are None when the
    objective does not need them."""

    locals_proj: torch.Tensor | None = None  # B x S x d
    global_proj: torch.Tensor | None = None  # B x d
    x: torch.Tensor | None = None  # B x 1 x side^3
    recon: torch.Tensor | None = None
    logits: torch.Tensor | None = None


@dataclass
class LossBreakdown:
    """Unweighted per-term values, the score penalty, and the minimized total."""

    terms: dict[str, torch.Tensor]
    penalty: torch.Tensor
    total: torch.Tensor

    def scalars(self) -> dict[str, float]:
        out = {k: float(v) for k, v in self.terms.items()}
        out["penalty"] = float(self.penalty)
        out["total"] = float(self.total)
        return out

    def recompute_total(self) -> torch.Tensor:
        """Re-derive the total from the parts (invariant check)."""
        total = self.penalty.clone()
        for key, value in self.terms.items():
            if key.split(":", 1)[0] in _MI_PREFIXES:
                total = total - value
            else:
                total = total + value
        return total


# ---------------------------------------------------------------------------
# Primitive scores and the InfoNCE estimator
# ---------------------------------------------------------------------------

def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x)


def critic_score(x, y, cfg: CriticConfig) -> torch.Tensor:
    """Scaled dot product x.y / sqrt(dim)."""
    x = _as_tensor(x)
    y = _as_tensor(y)
    if x.shape != y.shape:
        raise ConfigurationError(
            f"critic inputs must share a shape; got {tuple(x.shape)} vs "
            f"{tuple(y.shape)}"
        )
    return (x * y).sum(-1) / math.sqrt(cfg.dim)


def clip_score(s, cfg: CriticConfig) -> torch.Tensor:
    """Soft clip c * tanh(s / c); odd, monotone, bounded by (-c, c)."""
    s = _as_tensor(s)
    return cfg.clip * torch.tanh(s / cfg.clip)


def infonce(scores) -> torch.Tensor:
    """InfoNCE over an N x N score matrix: diagonal entries are positives,
    off-diagonal entries of the same row are negatives.

    Returns (1/N) sum_i [ s_ii - log((1/N) sum_{j != i} exp(s_ij)) ],
    evaluated with log-sum-exp stabilization.
    """
    scores = _as_tensor(scores)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ConfigurationError("infonce expects a square score matrix")
    n = scores.shape[0]
    if n < 2:
        raise ConfigurationError(
            "infonce needs N >= 2 (no negatives exist for N=1)"
        )
    eye = torch.eye(n, dtype=torch.bool, device=scores.device)
    masked = scores.masked_fill(eye, float("-inf"))
    lse = torch.logsumexp(masked, dim=1)
    return (scores.diagonal() - lse + math.log(n)).mean()


def _local_global_nce(
    locals_proj: torch.Tensor,
    globals_proj: torch.Tensor,
    cfg: CriticConfig,
    collect: list | None = None,
) -> torch.Tensor:
    """InfoNCE where each (sample i, location s) local pairs positively with
    sample i's global and negatively with the other samples' globals;
    averaged over locations."""
    b = locals_proj.shape[0]
    if b < 2:
        raise ConfigurationError("contrastive losses need a batch of >= 2")
    if globals_proj.shape[0] != b:
        raise ConfigurationError("locals/globals batch mismatch")
    raw = torch.einsum("isd,jd->isj", locals_proj, globals_proj) / math.sqrt(
        cfg.dim
    )
    if collect is not None:
        collect.append(raw)
    clipped = clip_score(raw, cfg)
    eye = torch.eye(b, dtype=torch.bool, device=clipped.device)
    masked = clipped.masked_fill(eye[:, None, :], float("-inf"))
    lse = torch.logsumexp(masked, dim=2)  # B x S
    diag = torch.diagonal(clipped, dim1=0, dim2=2).transpose(0, 1)  # B x S
    return (diag - lse + math.log(b)).mean()


# ---------------------------------------------------------------------------
# The four primary losses
# ---------------------------------------------------------------------------

def loss_cr(
    locals_m: torch.Tensor,
    z_m: torch.Tensor,
    cfg: CriticConfig,
    _collect: list | None = None,
) -> torch.Tensor:
    """Intra-modal local-to-global InfoNCE (one modality)."""
    return _local_global_nce(locals_m, z_m, cfg, _collect)


def loss_xx(
    locals_m: torch.Tensor,
    z_k: torch.Tensor,
    cfg: CriticConfig,
    _collect: list | None = None,
) -> torch.Tensor:
    """Cross-modal local-to-global InfoNCE (one direction, m locals vs k
    globals); symmetric composition adds the flipped direction."""
    return _local_global_nce(locals_m, z_k, cfg, _collect)


def loss_rr(
    z_m: torch.Tensor,
    z_k: torch.Tensor,
    cfg: CriticConfig,
    _collect: list | None = None,
) -> torch.Tensor:
    """Cross-modal global-to-global InfoNCE on the B x B score matrix."""
    if z_m.shape[0] < 2:
        raise ConfigurationError("contrastive losses need a batch of >= 2")
    raw = z_m @ z_k.transpose(0, 1) / math.sqrt(cfg.dim)
    if _collect is not None:
        _collect.append(raw)
    return infonce(clip_score(raw, cfg))


def sample_anchor_fractions(rng: np.random.Generator, batch: int) -> np.ndarray:
    """One uniform draw per sample, shared by both CC directions so the
    composed loss is invariant under swapping modality labels."""
    return rng.random(batch)


def loss_cc(
    locals_m: torch.Tensor,
    locals_k: torch.Tensor,
    cfg: CriticConfig,
    rng: np.random.Generator | None = None,
    anchor_fractions: np.ndarray | None = None,
    _collect: list | None = None,
) -> torch.Tensor:
    """Cross-modal local-to-local InfoNCE: one location of modality k is
    sampled per subject and treated as that subject's global anchor."""
    b, s_k = locals_k.shape[0], locals_k.shape[1]
    if b < 2:
        raise ConfigurationError("contrastive losses need a batch of >= 2")
    if anchor_fractions is None:
        if rng is None:
            raise ConfigurationError("loss_cc needs an rng or anchor_fractions")
        anchor_fractions = sample_anchor_fractions(rng, b)
    idx = np.minimum((anchor_fractions * s_k).astype(np.int64), s_k - 1)
    anchors = locals_k[torch.arange(b), torch.as_tensor(idx)]
    return _local_global_nce(locals_m, anchors, cfg, _collect)


# ---------------------------------------------------------------------------
# Baseline losses
# ---------------------------------------------------------------------------

def loss_cca(
    z_m: torch.Tensor, z_k: torch.Tensor, eps: float = 1e-3
) -> torch.Tensor:
    """Soft correlation-alignment surrogate.

    Batch-centers both sides, ridge-regularizes the covariances, and returns
    the negated trace of T T^T for the whitened cross-correlation
    T = C_mm^{-1/2} C_mk C_kk^{-1/2} (the sum of squared canonical
    correlations). The value lies in [-d, 0], reaches about -d for
    identical inputs, is invariant to orthogonal rotations of either side,
    and stays smooth where an exact eigensolver formulation would not.
    """
    if z_m.shape != z_k.shape:
        raise ConfigurationError("loss_cca inputs must share a shape")
    b, d = z_m.shape
    if b < 2:
        raise ConfigurationError("loss_cca needs a batch of >= 2")
    zm = z_m - z_m.mean(0, keepdim=True)
    zk = z_k - z_k.mean(0, keepdim=True)
    denom = b - 1
    ident = torch.eye(d, dtype=z_m.dtype, device=z_m.device)
    c_mm = zm.transpose(0, 1) @ zm / denom + eps * ident
    c_kk = zk.transpose(0, 1) @ zk / denom + eps * ident
    c_mk = zm.transpose(0, 1) @ zk / denom
    if not (
        torch.isfinite(c_mm).all()
        and torch.isfinite(c_kk).all()
        and torch.isfinite(c_mk).all()
    ):
        raise NumericError("loss_cca: non-finite covariance")
    # tr(T T^T) = tr(C_kk^{-1} C_km C_mm^{-1} C_mk)
    value = torch.trace(
        torch.linalg.solve(c_kk, c_mk.transpose(0, 1))
        @ torch.linalg.solve(c_mm, c_mk)
    )
    return -value


def loss_ae(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of the per-sample squared reconstruction error
    (summed over voxels)."""
    if x.shape != x_hat.shape:
        raise ConfigurationError(
            f"reconstruction shape mismatch: {tuple(x.shape)} vs "
            f"{tuple(x_hat.shape)}"
        )
    diff = (x - x_hat).flatten(1)
    return (diff * diff).sum(1).mean()


def loss_supervised(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean negative log-softmax of the true class."""
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device)
    if (labels < 0).any():
        raise ConfigurationError(
            "UNLABELED samples in a supervised batch; filter them upstream"
        )
    if labels.max() >= logits.shape[1]:
        raise ConfigurationError("label outside logit range")
    logp = torch.log_softmax(logits, dim=1)
    return -logp[torch.arange(len(labels)), labels].mean()


# ---------------------------------------------------------------------------
# Composition
# ---------------------------------------------------------------------------

def _require(value, term: str, what: str):
    if value is None:
        raise ConfigurationError(f"term {term} requires {what}")
    return value


def compose(
    spec: ObjectiveSpec,
    outputs: dict[str, ModalityOutputs],
    labels=None,
    rng: np.random.Generator | None = None,
) -> LossBreakdown:
    """Evaluate every selected term and assemble the minimized total.

    MI terms are negated; reconstruction / cross-entropy / correlation terms
    enter positively; the penalty is lambda times the mean squared pre-clip
    critic score over all score matrices used. Symmetric cross-modal terms
    are computed in both directions.
    """
    spec.validate()
    mods = spec.modalities
    a, b = mods
    directions = [(a, b), (b, a)] if spec.symmetrize else [(a, b)]
    cfg = spec.critic
    term_set = set(spec.terms)

    collected: list[torch.Tensor] = []
    terms: dict[str, torch.Tensor] = {}

    if "CR" in term_set:
        for m in mods:
            out = outputs[m]
            terms[f"CR:{m}"] = loss_cr(
                _require(out.locals_proj, "CR", f"projected locals for {m}"),
                _require(out.global_proj, "CR", f"projected global for {m}"),
                cfg,
                collected,
            )
    if "XX" in term_set:
        for m, k in directions:
            terms[f"XX:{m}>{k}"] = loss_xx(
                _require(
                    outputs[m].locals_proj, "XX", f"projected locals for {m}"
                ),
                _require(
                    outputs[k].global_proj, "XX", f"projected global for {k}"
                ),
                cfg,
                collected,
            )
    if "RR" in term_set:
        for m, k in directions:
            terms[f"RR:{m}>{k}"] = loss_rr(
                _require(
                    outputs[m].global_proj, "RR", f"projected global for {m}"
                ),
                _require(
                    outputs[k].global_proj, "RR", f"projected global for {k}"
                ),
                cfg,
                collected,
            )
    if "CC" in term_set:
        if rng is None:
            raise ConfigurationError("CC requires an explicit rng")
        batch = _require(
            outputs[a].locals_proj, "CC", f"projected locals for {a}"
        ).shape[0]
        fractions = sample_anchor_fractions(rng, batch)
        for m, k in directions:
            terms[f"CC:{m}>{k}"] = loss_cc(
                _require(
                    outputs[m].locals_proj, "CC", f"projected locals for {m}"
                ),
                _require(
                    outputs[k].locals_proj, "CC", f"projected locals for {k}"
                ),
                cfg,
                anchor_fractions=fractions,
                _collect=collected,
            )
    if "CCA" in term_set:
        value = loss_cca(
            _require(outputs[a].global_proj, "CCA", f"projected global for {a}"),
            _require(outputs[b].global_proj, "CCA", f"projected global for {b}"),
        )
        for m, k in directions:
            terms[f"CCA:{m}>{k}"] = value
    if "AE" in term_set:
        for m in mods:
            out = outputs[m]
            terms[f"AE:{m}"] = loss_ae(
                _require(out.x, "AE", f"input batch for {m}"),
                _require(out.recon, "AE", f"decoder output for {m}"),
            )
    if "CE" in term_set:
        if labels is None:
            raise ConfigurationError("term CE requires labels")
        for m in mods:
            terms[f"CE:{m}"] = loss_supervised(
                _require(outputs[m].logits, "CE", f"classifier logits for {m}"),
                labels,
            )

    some = next(iter(terms.values()))
    if collected:
        if cfg.penalty_positives_only:
            flat = torch.cat(
                [
                    torch.diagonal(t, dim1=0, dim2=t.ndim - 1).flatten()
                    for t in collected
                ]
            )
        else:
            flat = torch.cat([t.flatten() for t in collected])
        penalty = cfg.penalty_lambda * (flat * flat).mean()
    else:
        penalty = torch.zeros((), dtype=some.dtype, device=some.device)

    total = penalty.clone()
    for key, value in terms.items():
        if key.split(":", 1)[0] in _MI_PREFIXES:
            total = total - value
        else:
            total = total + value
    return LossBreakdown(terms=terms, penalty=penalty, total=total)
