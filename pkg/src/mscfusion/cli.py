"""Command-line pipeline: synth | pretrain | probe | align | saliency |
report | taxonomy.

Every command is idempotent given an unchanged config and seed, writes its
artifacts under an experiment directory, and exits nonzero with a
categorized message on failure. Configuration lives in one JSON document
with data / model / objective / train / eval / saliency sections.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .errors import (
    ConfigurationError,
    DependencyError,
    MscfusionError,
)
from .evaluation import (
    ProbeConfig,
    cka,
    extract_features,
    fit_probe,
    select_checkpoint,
    task_features,
)
from .model import (
    EncoderSpec,
    default_encoder_spec,
    model_config_for_objective,
)
from .objectives import (
    CriticConfig,
    ObjectiveSpec,
    baseline_schemes,
    objective_name,
    objective_terms,
    taxonomy_nodes,
)
from .report import write_report
from .saliency import (
    cluster_attributions,
    crossmodal_links,
    group_stats,
    integrated_gradients_dim,
    postprocess,
    threshold_and_clusterize,
)
from .synthdata import (
    DatasetManifest,
    LatentSpec,
    generate_dataset,
    load_dataset,
    save_dataset,
    write_volume,
)
from .trainer import (
    CheckpointStore,
    TrainConfig,
    pretrain,
    rebuild_model,
)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

_DEFAULTS = {
    "model": {
        "repr_dim": 64,
        "global_head_hidden": 0,
        "channels": None,
        "local_layer": None,
    },
    "train": {
        "learning_rate": 4e-4,
        "epochs": 20,
        "batch_size": 8,
        "seed": 0,
        "checkpoint_k": 10,
        "pad": 8,
    },
    "eval": {"trials": 500, "seed": 0, "task": "2way", "max_iter": 3000},
    "saliency": {
        "steps": 64,
        "sigma": 1.5,
        "min_cluster_size": 200,
        "top_k": 64,
        "connectivity": 26,
        "dims": "top-beta",
    },
    "objective": {
        "symmetrize": True,
        "critic": {"dim": 64, "clip": 20.0, "penalty_lambda": 4e-2},
    },
}


def _merged(section: str, given: dict | None) -> dict:
    out = dict(_DEFAULTS.get(section, {}))
    for key, value in (given or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = {**out[key], **value}
        else:
            out[key] = value
    return out


def load_config(path: str | Path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"config not found: {p}")
    raw = json.loads(p.read_text())
    config = {
        "data": raw.get("data", {}),
        "model": _merged("model", raw.get("model")),
        "objective": _merged("objective", raw.get("objective")),
        "train": _merged("train", raw.get("train")),
        "eval": _merged("eval", raw.get("eval")),
        "saliency": _merged("saliency", raw.get("saliency")),
    }
    obj = config["objective"]
    if "terms" not in obj and "name" not in obj:
        raise ConfigurationError("objective section needs 'terms' or 'name'")
    terms = (
        tuple(obj["terms"]) if "terms" in obj else objective_terms(obj["name"])
    )
    # Normalizes and validates the vocabulary (bad names list valid schemes).
    obj["terms"] = list(objective_terms(objective_name(terms)))
    obj["name"] = objective_name(terms)
    if "manifest" in config["data"]:
        mpath = Path(config["data"]["manifest"])
        if not mpath.exists():
            raise ConfigurationError(f"manifest path does not exist: {mpath}")
    elif "generate" not in config["data"]:
        raise ConfigurationError("data section needs 'manifest' or 'generate'")
    return config


def _latent_spec(gen: dict) -> LatentSpec:
    fields = {
        k: gen[k]
        for k in (
            "shared_dim",
            "unique_dim1",
            "unique_dim2",
            "n_classes",
            "noise_sigma",
            "volume_side",
            "seed",
        )
        if k in gen
    }
    if "class_signal_dims" in gen:
        fields["class_signal_dims"] = tuple(gen["class_signal_dims"])
    spec = LatentSpec(**fields)
    spec.validate()
    return spec


def resolve_manifest(config: dict) -> DatasetManifest:
    data = config["data"]
    if "manifest" in data:
        path = Path(data["manifest"])
        if not path.exists():
            raise DependencyError(f"manifest missing: {path} (run synth first)")
        return load_dataset(path)
    gen = data["generate"]
    return generate_dataset(
        _latent_spec(gen),
        n_subjects=gen.get("n_subjects", 40),
        folds=gen.get("folds", 5),
        holdout_frac=gen.get("holdout_frac", 0.0),
    )


def _objective_spec(config: dict) -> ObjectiveSpec:
    obj = config["objective"]
    critic = obj.get("critic", {})
    spec = ObjectiveSpec(
        terms=tuple(obj["terms"]),
        symmetrize=obj.get("symmetrize", True),
        critic=CriticConfig(
            dim=critic.get("dim", 64),
            clip=critic.get("clip", 20.0),
            penalty_lambda=critic.get("penalty_lambda", 4e-2),
            penalty_positives_only=critic.get("penalty_positives_only", False),
        ),
    )
    spec.validate()
    return spec


def _encoder_spec(config: dict, side: int) -> EncoderSpec:
    model = config["model"]
    if model.get("channels"):
        spec = EncoderSpec(
            input_side=side,
            channels=tuple(model["channels"]),
            local_layer=model.get("local_layer") or 3,
            repr_dim=model["repr_dim"],
        )
    else:
        spec = default_encoder_spec(side, repr_dim=model["repr_dim"])
        if model.get("local_layer"):
            spec = EncoderSpec(
                input_side=spec.input_side,
                channels=spec.channels,
                local_layer=model["local_layer"],
                repr_dim=spec.repr_dim,
            )
    spec.validate()
    return spec


def _n_classes_for_task(task: str) -> int:
    return 2 if task == "2way" else 3


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(config: dict, out_dir: str | Path) -> Path:
    if "generate" not in config["data"]:
        raise ConfigurationError("synth needs a data.generate section")
    manifest = resolve_manifest(
        {**config, "data": {"generate": config["data"]["generate"]}}
    )
    path = save_dataset(manifest, out_dir)
    print(f"wrote {path}")
    return path


def cmd_pretrain(config: dict, fold: int, out_dir: str | Path) -> Path:
    manifest = resolve_manifest(config)
    if not 0 <= fold < manifest.split.folds:
        raise ConfigurationError(
            f"fold {fold} out of range 0..{manifest.split.folds - 1}"
        )
    objective = _objective_spec(config)
    if set(objective.terms) == {"CC"}:
        print(
            "warning: CC alone leaves the encoder's last layers behaving as "
            "a random projection; compose it with another objective for "
            "usable global features",
            file=sys.stderr,
        )
    task = config["eval"]["task"]
    encoder = _encoder_spec(config, manifest.generator_spec.volume_side)
    model_config = model_config_for_objective(
        encoder,
        objective.terms,
        global_head_hidden=config["model"]["global_head_hidden"],
        n_classes=_n_classes_for_task(task),
    )
    train = config["train"]
    train_config = TrainConfig(
        objective=objective,
        learning_rate=train["learning_rate"],
        epochs=train["epochs"],
        batch_size=train["batch_size"],
        seed=train["seed"],
        checkpoint_k=train["checkpoint_k"],
        pad=train["pad"],
        task=task,
    )
    records, metrics = pretrain(manifest, fold, train_config, model_config)

    exp = Path(out_dir)
    exp.mkdir(parents=True, exist_ok=True)
    store = CheckpointStore(exp / "checkpoints", k=train_config.checkpoint_k)
    for old in store.paths():
        old.unlink()
    for record in records:
        store.save(record)
    _write_csv_rows(exp / "metrics.csv", metrics)
    echo = {**config, "fold": fold}
    (exp / "config.json").write_text(json.dumps(echo, indent=2))
    print(
        f"pretrained {config['objective']['name']} fold {fold}: "
        f"{len(records)} checkpoints, best val loss "
        f"{records[0].validation_loss:.6f}"
    )
    return exp


def _write_csv_rows(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow(
                {k: repr(v) if isinstance(v, float) else v for k, v in row.items()}
            )


def _load_experiment(exp_dir: str | Path) -> tuple[dict, DatasetManifest, CheckpointStore]:
    exp = Path(exp_dir)
    config_path = exp / "config.json"
    if not config_path.exists():
        raise DependencyError(f"{exp}: no config.json (run pretrain first)")
    config = json.loads(config_path.read_text())
    manifest = resolve_manifest(config)
    store = CheckpointStore(
        exp / "checkpoints", k=config["train"]["checkpoint_k"]
    )
    if not store.paths():
        raise DependencyError(f"{exp}: no checkpoints (run pretrain first)")
    return config, manifest, store


def cmd_probe(
    exp_dir: str | Path, task: str | None = None, seed: int | None = None
) -> int:
    config, manifest, store = _load_experiment(exp_dir)
    exp = Path(exp_dir)
    fold = config["fold"]
    task = task or config["eval"]["task"]
    probe_config = ProbeConfig(
        trials=config["eval"]["trials"],
        task=task,
        seed=config["eval"]["seed"] if seed is None else seed,
        max_iter=config["eval"]["max_iter"],
    )
    train_pairs = manifest.train_pairs(fold)
    val_pairs = manifest.val_pairs(fold)
    test_pairs = manifest.holdout_pairs()

    rows = []
    details = {}
    for record in store.load_all():
        model = rebuild_model(record)
        for modality in ("m1", "m2"):
            fm_train = task_features(
                extract_features(model, train_pairs, modality), task
            )
            fm_val = task_features(
                extract_features(model, val_pairs, modality), task
            )
            fm_test = (
                task_features(
                    extract_features(model, test_pairs, modality), task
                )
                if test_pairs
                else None
            )
            result = fit_probe(fm_train, fm_val, probe_config, fm_test)
            rows.append(
                {
                    "model": config["objective"]["name"],
                    "fold": fold,
                    "modality": modality,
                    "task": task,
                    "metric_val": result.metric_val,
                    "metric_test": result.metric_test,
                    "checkpoint_id": record.epoch,
                }
            )
            details[(record.epoch, modality)] = result
    rows.sort(key=lambda r: (r["checkpoint_id"], r["modality"]))
    _write_csv_rows(exp / "results.csv", rows)

    selected = select_checkpoint(
        [
            {
                "checkpoint": r["checkpoint_id"],
                "epoch": r["checkpoint_id"],
                "modality": r["modality"],
                "metric_val": r["metric_val"],
            }
            for r in rows
        ]
    )
    doc = {
        "checkpoint": selected,
        "task": task,
        "metrics": {
            m: {
                "metric_val": details[(selected, m)].metric_val,
                "metric_test": details[(selected, m)].metric_test,
            }
            for m in ("m1", "m2")
        },
        "hyperparams": {
            m: {
                "C": details[(selected, m)].best_c,
                "l1_ratio": details[(selected, m)].best_l1_ratio,
            }
            for m in ("m1", "m2")
        },
        "betas": {
            m: details[(selected, m)].betas.tolist() for m in ("m1", "m2")
        },
    }
    (exp / "selected.json").write_text(json.dumps(doc, indent=2))
    print(f"selected checkpoint {selected} (epoch) for {exp}")
    return selected


def _selected_record(exp: Path, store: CheckpointStore):
    selected_path = exp / "selected.json"
    if selected_path.exists():
        doc = json.loads(selected_path.read_text())
        return store.load_by_epoch(doc["checkpoint"]), doc
    return store.load_all()[0], None


def cmd_align(exp_dir: str | Path) -> float:
    config, manifest, store = _load_experiment(exp_dir)
    exp = Path(exp_dir)
    record, _ = _selected_record(exp, store)
    model = rebuild_model(record)
    pairs = manifest.eval_pairs(config["fold"])
    z1 = extract_features(model, pairs, "m1").Z
    z2 = extract_features(model, pairs, "m2").Z
    value = cka(z1, z2)
    _write_csv_rows(
        exp / "cka.csv",
        [
            {
                "model": config["objective"]["name"],
                "fold": config["fold"],
                "cka": value,
            }
        ],
    )
    print(f"cka({exp}) = {value:.6f}")
    return value


def _top_beta_dims(betas: np.ndarray) -> list[int]:
    """Dimensions carrying the highest positive and lowest negative
    coefficients (flattened across classes)."""
    coef = np.asarray(betas)
    dims = [int(np.unravel_index(np.argmax(coef), coef.shape)[-1])]
    low = int(np.unravel_index(np.argmin(coef), coef.shape)[-1])
    if low not in dims:
        dims.append(low)
    return dims


def cmd_saliency(exp_dir: str | Path, dims: str | None = None) -> Path:
    config, manifest, store = _load_experiment(exp_dir)
    exp = Path(exp_dir)
    record, selected_doc = _selected_record(exp, store)
    if selected_doc is None:
        raise DependencyError(f"{exp}: no selected.json (run probe first)")
    sal_cfg = config["saliency"]
    dims_mode = dims or sal_cfg["dims"]
    model = rebuild_model(record)
    repr_dim = record.model_config.encoder.repr_dim

    pairs = manifest.eval_pairs(config["fold"])
    group_a = [p for p in pairs if p.label == 0]
    group_b = [p for p in pairs if p.label == 1]
    if len(group_a) < 2 or len(group_b) < 2:
        raise ConfigurationError(
            "saliency group statistics need >= 2 subjects per class in the "
            "evaluation split"
        )

    if dims_mode == "all":
        dims_by_mod = {m: list(range(repr_dim)) for m in ("m1", "m2")}
    elif dims_mode == "top-beta":
        dims_by_mod = {
            m: _top_beta_dims(np.asarray(selected_doc["betas"][m]))
            for m in ("m1", "m2")
        }
    else:
        raise ConfigurationError("dims must be 'all' or 'top-beta'")

    sal_dir = exp / "saliency"
    (sal_dir / "vols").mkdir(parents=True, exist_ok=True)
    mask = np.ones_like(pairs[0].vol_m1, dtype=bool)

    clusters_doc: dict = {}
    dice_rows = []
    dice_tables: dict[str, dict[int, dict[int, float]]] = {}
    for modality in ("m1", "m2"):
        part = model[modality]
        clusters_doc[modality] = {}
        dice_tables[modality] = {}
        for dim in dims_by_mod[modality]:
            maps = {}
            for p in group_a + group_b:
                raw = integrated_gradients_dim(
                    part, p.volume(modality), dim, steps=sal_cfg["steps"]
                )
                sal = postprocess(raw, mask, sigma=sal_cfg["sigma"])
                maps[p.subject_id] = sal
                write_volume(
                    sal_dir / "vols" / f"{modality}_dim{dim}_{p.subject_id}.mscv",
                    sal,
                )
            stats = group_stats(
                [maps[p.subject_id] for p in group_a],
                [maps[p.subject_id] for p in group_b],
            )
            write_volume(
                sal_dir / f"rbc_{modality}_dim{dim}.mscv",
                stats.rbc.astype(np.float32),
            )
            rep = threshold_and_clusterize(
                stats,
                min_size=sal_cfg["min_cluster_size"],
                connectivity=sal_cfg["connectivity"],
            )
            attributions = cluster_attributions(rep, manifest.atlas)
            clusters_doc[modality][str(dim)] = attributions
            table = {}
            for row in attributions:
                if row["roi"]:
                    table[row["roi"]] = max(
                        table.get(row["roi"], 0.0), row["dice"]
                    )
                    dice_rows.append(
                        {
                            "modality": modality,
                            "dimension": dim,
                            "roi": row["roi"],
                            "roi_name": manifest.atlas.roi_names[row["roi"] - 1],
                            "dice": row["dice"],
                        }
                    )
            dice_tables[modality][dim] = table

    (sal_dir / "clusters.json").write_text(json.dumps(clusters_doc, indent=2))
    _write_csv_rows(sal_dir / "dice.csv", dice_rows)

    z1 = extract_features(model, pairs, "m1").Z
    z2 = extract_features(model, pairs, "m2").Z
    graph = crossmodal_links(
        z1, z2, dice_tables["m1"], dice_tables["m2"], top_k=sal_cfg["top_k"]
    )
    names = manifest.atlas.roi_names
    links_doc = {
        "top_k": graph.top_k,
        "edges": [
            {
                "roi_m1": r1,
                "roi_m1_name": names[r1 - 1],
                "roi_m2": r2,
                "roi_m2_name": names[r2 - 1],
                "weight": w,
            }
            for r1, r2, w in graph.edges
        ],
    }
    (sal_dir / "links.json").write_text(json.dumps(links_doc, indent=2))
    _write_csv_rows(
        sal_dir / "links.csv",
        [
            {"roi_m1": r1, "roi_m2": r2, "weight": w, "rank": i + 1}
            for i, (r1, r2, w) in enumerate(graph.edges)
        ],
    )
    print(f"saliency artifacts written to {sal_dir}")
    return sal_dir


def cmd_report(exp_dirs: list[str | Path], out_dir: str | Path) -> Path:
    path = write_report(exp_dirs, out_dir)
    print(f"wrote {path}")
    return path


def cmd_taxonomy() -> list[str]:
    names = taxonomy_nodes() + baseline_schemes()
    for name in names:
        print(name)
    return names


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mscfusion",
        description="multi-scale coordinated fusion pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic paired dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("pretrain", help="pretrain one objective on one fold")
    p.add_argument("--config", required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("probe", help="logistic-regression probing")
    p.add_argument("exp_dir")
    p.add_argument("--task", choices=("2way", "3way"), default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("align", help="CKA alignment between modalities")
    p.add_argument("exp_dir")

    p = sub.add_parser("saliency", help="integrated-gradient group analysis")
    p.add_argument("exp_dir")
    p.add_argument("--dims", choices=("all", "top-beta"), default=None)

    p = sub.add_parser("report", help="aggregate experiments into a report")
    p.add_argument("exp_dirs", nargs="+")
    p.add_argument("--out", required=True)

    sub.add_parser("taxonomy", help="list every trainable scheme")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "synth":
            config = load_config(args.config)
            if args.seed is not None:
                config["data"].setdefault("generate", {})["seed"] = args.seed
            cmd_synth(config, args.out)
        elif args.command == "pretrain":
            config = load_config(args.config)
            if args.seed is not None:
                config["train"]["seed"] = args.seed
            cmd_pretrain(config, args.fold, args.out)
        elif args.command == "probe":
            cmd_probe(args.exp_dir, task=args.task, seed=args.seed)
        elif args.command == "align":
            cmd_align(args.exp_dir)
        elif args.command == "saliency":
            cmd_saliency(args.exp_dir, dims=args.dims)
        elif args.command == "report":
            cmd_report(args.exp_dirs, args.out)
        elif args.command == "taxonomy":
            cmd_taxonomy()
    except MscfusionError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
