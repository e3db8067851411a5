"""Self-supervised / supervised pretraining with top-k checkpointing.

One process trains both modality models under a composed objective; for
unimodal schemes (CR, AE, Supervised) the per-modality losses simply add, so
checkpoints of the two modalities stay paired by epoch. Checkpoints are
ranked by validation loss and at most k are retained.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import (
    ConfigurationError,
    IntegrityError,
    TrainingDivergedError,
)
from .model import (
    EncoderSpec,
    FusionModel,
    ModelConfig,
    build_model,
)
from .objectives import LossBreakdown, ModalityOutputs, ObjectiveSpec, compose
from .synthdata import (
    UNLABELED,
    DatasetManifest,
    VolumePair,
    reflect_pad_crop,
)


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loop settings. The paper-scale run uses 500 epochs;
    20 is the desk-scale default."""

    objective: ObjectiveSpec
    learning_rate: float = 4e-4
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    checkpoint_k: int = 10
    pad: int = 8
    betas: tuple[float, float] = (0.9, 0.999)
    task: str = "2way"  # label mapping for the CE term

    def validate(self) -> None:
        self.objective.validate()
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.checkpoint_k < 1:
            raise ConfigurationError("checkpoint_k must be >= 1")
        if self.objective.contrastive and self.batch_size < 2:
            raise ConfigurationError(
                "batch_size must be >= 2 for contrastive terms"
            )
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.task not in ("2way", "3way"):
            raise ConfigurationError("task must be '2way' or '3way'")


@dataclass
class CheckpointRecord:
    """Parameter snapshot plus enough metadata to rebuild the model."""

    epoch: int
    validation_loss: float
    state: dict[str, torch.Tensor]
    model_config: ModelConfig
    objective: ObjectiveSpec
    seed: int


def select_task_pairs(
    pairs: list[VolumePair], task: str
) -> tuple[list[VolumePair], np.ndarray]:
    """Label mapping per task: 2-way keeps classes {0, 1}; 3-way treats the
    UNLABELED pool as class 2."""
    kept = []
    labels = []
    for p in pairs:
        if task == "2way":
            if p.label in (0, 1):
                kept.append(p)
                labels.append(p.label)
        else:
            kept.append(p)
            labels.append(2 if p.label == UNLABELED else p.label)
    return kept, np.asarray(labels, dtype=np.int64)


def modality_outputs(
    model: FusionModel,
    spec: ObjectiveSpec,
    batches: dict[str, torch.Tensor],
) -> dict[str, ModalityOutputs]:
    """Run both encoders and whichever heads the objective's terms need."""
    term_set = set(spec.terms)
    outs: dict[str, ModalityOutputs] = {}
    for m in spec.modalities:
        part = model[m]
        x = batches[m]
        fwd = part.encode(x)
        outs[m] = ModalityOutputs(
            locals_proj=(
                part.project_locals(fwd)
                if term_set & {"CR", "XX", "CC"}
                else None
            ),
            global_proj=(
                part.project_global(fwd)
                if term_set & {"CR", "XX", "RR", "CCA"}
                else None
            ),
            x=x if "AE" in term_set else None,
            recon=part.decoder(fwd.z) if "AE" in term_set else None,
            logits=part.classifier(fwd.z) if "CE" in term_set else None,
        )
    return outs


def _batch_slices(n: int, batch_size: int, need_pairs: bool) -> list[slice]:
    """Contiguous batches; a trailing singleton is merged into the previous
    batch when contrastive terms need at least two samples."""
    slices = [slice(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]
    if need_pairs and len(slices) > 1:
        last = slices[-1]
        if last.stop - last.start < 2:
            slices[-2] = slice(slices[-2].start, last.stop)
            slices.pop()
    return slices


def _stack(pairs: list[VolumePair], modality: str) -> torch.Tensor:
    vols = np.stack([p.volume(modality) for p in pairs])
    return torch.from_numpy(vols).unsqueeze(1).float()


def evaluate_loss(
    model: FusionModel,
    pairs: list[VolumePair],
    labels: np.ndarray | None,
    config: TrainConfig,
) -> tuple[float, dict[str, float]]:
    """Mean composed loss over fixed, unaugmented batches (pure function of
    the parameters and data)."""
    spec = config.objective
    if config.objective.contrastive and len(pairs) < 2:
        raise ConfigurationError("need >= 2 samples to evaluate contrastive loss")
    cc_rng = np.random.default_rng(config.seed)
    x1 = _stack(pairs, "m1")
    x2 = _stack(pairs, "m2")
    total = 0.0
    terms_sum: dict[str, float] = {}
    n_done = 0
    model.eval()
    with torch.no_grad():
        for sl in _batch_slices(len(pairs), config.batch_size, spec.contrastive):
            batches = {"m1": x1[sl], "m2": x2[sl]}
            lab = labels[sl] if labels is not None else None
            bd = compose(spec, modality_outputs(model, spec, batches), lab, cc_rng)
            n = sl.stop - sl.start
            total += float(bd.total) * n
            for k, v in bd.scalars().items():
                terms_sum[k] = terms_sum.get(k, 0.0) + v * n
            n_done += n
    model.train()
    return total / n_done, {k: v / n_done for k, v in terms_sum.items()}


class _TopK:
    """Keeps the k lowest-validation-loss records, ascending."""

    def __init__(self, k: int):
        self.k = k
        self.records: list[CheckpointRecord] = []

    def offer(self, record: CheckpointRecord) -> bool:
        self.records.append(record)
        self.records.sort(key=lambda r: (r.validation_loss, r.epoch))
        if len(self.records) > self.k:
            dropped = self.records.pop()
            return dropped is not record
        return True


def pretrain(
    manifest: DatasetManifest,
    fold: int,
    config: TrainConfig,
    model_config: ModelConfig,
) -> tuple[list[CheckpointRecord], list[dict]]:
    """Train on everything outside ``fold`` and the hold-out set, validating
    on ``fold``. Returns the retained checkpoint records (ascending
    validation loss) and one metrics row per epoch.
    """
    config.validate()
    spec = config.objective
    needs_labels = "CE" in spec.terms

    train_pairs = manifest.train_pairs(fold)
    val_pairs = manifest.val_pairs(fold)
    if needs_labels:
        train_pairs, train_labels = select_task_pairs(train_pairs, config.task)
        val_pairs, val_labels = select_task_pairs(val_pairs, config.task)
    else:
        train_labels = val_labels = None
    if not train_pairs or not val_pairs:
        raise ConfigurationError(
            f"fold {fold}: empty train or validation set"
        )
    if spec.contrastive and len(train_pairs) < 2:
        raise ConfigurationError("contrastive training needs >= 2 subjects")

    seq = np.random.SeedSequence(config.seed)
    init_seed, order_ss, aug_ss, cc_ss = seq.spawn(4)
    order_rng = np.random.default_rng(order_ss)
    aug_rng = np.random.default_rng(aug_ss)
    cc_rng = np.random.default_rng(cc_ss)

    model = build_model(model_config, seed=int(init_seed.generate_state(1)[0]))
    optimizer = torch.optim.RAdam(
        model.parameters(), lr=config.learning_rate, betas=config.betas
    )

    side = model_config.encoder.input_side
    store = _TopK(config.checkpoint_k)
    metrics: list[dict] = []
    for epoch in range(config.epochs):
        perm = order_rng.permutation(len(train_pairs))
        train_total = 0.0
        n_done = 0
        for sl in _batch_slices(
            len(train_pairs), config.batch_size, spec.contrastive
        ):
            idx = perm[sl]
            batch_pairs = [train_pairs[i] for i in idx]
            vols = {
                m: torch.from_numpy(
                    np.stack(
                        [
                            reflect_pad_crop(
                                p.volume(m), config.pad, side, aug_rng
                            )
                            for p in batch_pairs
                        ]
                    )
                )
                .unsqueeze(1)
                .float()
                for m in ("m1", "m2")
            }
            lab = train_labels[idx] if train_labels is not None else None
            bd = compose(spec, modality_outputs(model, spec, vols), lab, cc_rng)
            if not torch.isfinite(bd.total):
                raise TrainingDivergedError(epoch)
            optimizer.zero_grad(set_to_none=True)
            bd.total.backward()
            optimizer.step()
            n = len(idx)
            train_total += float(bd.total.detach()) * n
            n_done += n

        val_loss, val_terms = evaluate_loss(model, val_pairs, val_labels, config)
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(epoch)
        row = {
            "epoch": epoch,
            "train_loss": train_total / n_done,
            "val_loss": val_loss,
        }
        for k, v in sorted(val_terms.items()):
            if k != "total":
                row[k] = v
        metrics.append(row)

        store.offer(
            CheckpointRecord(
                epoch=epoch,
                validation_loss=val_loss,
                state={
                    k: v.detach().clone() for k, v in model.state_dict().items()
                },
                model_config=model_config,
                objective=spec,
                seed=config.seed,
            )
        )
    return store.records, metrics


def rebuild_model(record: CheckpointRecord) -> FusionModel:
    """Reconstruct the model for a record and load its exact parameters."""
    model = build_model(record.model_config, seed=0)
    model.load_state_dict(record.state)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# Checkpoint persistence (single file: sha256 hex header + torch payload)
# ---------------------------------------------------------------------------

def _spec_to_dict(record: CheckpointRecord) -> dict:
    return {
        "epoch": record.epoch,
        "validation_loss": record.validation_loss,
        "seed": record.seed,
        "model_config": asdict(record.model_config),
        "objective": {
            "terms": list(record.objective.terms),
            "symmetrize": record.objective.symmetrize,
            "modalities": list(record.objective.modalities),
            "critic": asdict(record.objective.critic),
        },
    }


def _spec_from_dict(doc: dict) -> tuple[ModelConfig, ObjectiveSpec]:
    mc = dict(doc["model_config"])
    enc = dict(mc.pop("encoder"))
    enc["channels"] = tuple(enc["channels"])
    model_config = ModelConfig(encoder=EncoderSpec(**enc), **mc)
    ob = doc["objective"]
    from .objectives import CriticConfig

    objective = ObjectiveSpec(
        terms=tuple(ob["terms"]),
        symmetrize=ob["symmetrize"],
        modalities=tuple(ob["modalities"]),
        critic=CriticConfig(**ob["critic"]),
    )
    return model_config, objective


class CheckpointStore:
    """Directory of ``NNNN.ckpt`` files enforcing top-k eviction."""

    def __init__(self, directory: str | Path, k: int = 10):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.k = k

    def _path(self, epoch: int) -> Path:
        return self.directory / f"{epoch:04d}.ckpt"

    def save(self, record: CheckpointRecord) -> Path:
        payload = {
            "meta": _spec_to_dict(record),
            "state": record.state,
        }
        buf = io.BytesIO()
        torch.save(payload, buf)
        blob = buf.getvalue()
        digest = hashlib.sha256(blob).hexdigest().encode("ascii")
        path = self._path(record.epoch)
        path.write_bytes(digest + blob)
        self._evict()
        return path

    def _evict(self) -> None:
        records = [(self.load_meta(p), p) for p in self.paths()]
        records.sort(key=lambda mp: (mp[0]["validation_loss"], mp[0]["epoch"]))
        for _, path in records[self.k :]:
            path.unlink()

    def paths(self) -> list[Path]:
        return sorted(self.directory.glob("*.ckpt"))

    def load_meta(self, path: Path) -> dict:
        return _spec_to_dict(self.load(path))

    def load(self, path: str | Path) -> CheckpointRecord:
        raw = Path(path).read_bytes()
        digest, blob = raw[:64], raw[64:]
        if hashlib.sha256(blob).hexdigest().encode("ascii") != digest:
            raise IntegrityError(f"{path}: checksum mismatch")
        payload = torch.load(io.BytesIO(blob), weights_only=False)
        meta = payload["meta"]
        model_config, objective = _spec_from_dict(meta)
        return CheckpointRecord(
            epoch=meta["epoch"],
            validation_loss=meta["validation_loss"],
            state=payload["state"],
            model_config=model_config,
            objective=objective,
            seed=meta["seed"],
        )

    def load_by_epoch(self, epoch: int) -> CheckpointRecord:
        path = self._path(epoch)
        if not path.exists():
            raise IntegrityError(f"no checkpoint for epoch {epoch}")
        return self.load(path)

    def load_all(self) -> list[CheckpointRecord]:
        records = [self.load(p) for p in self.paths()]
        records.sort(key=lambda r: (r.validation_loss, r.epoch))
        return records


def save_checkpoint(record: CheckpointRecord, store: CheckpointStore) -> Path:
    return store.save(record)


def load_checkpoint(store: CheckpointStore, epoch: int) -> CheckpointRecord:
    return store.load_by_epoch(epoch)
