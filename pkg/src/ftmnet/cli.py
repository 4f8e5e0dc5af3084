"""Command line interface.

Subcommands cover the full workflow: synthesize a domain-shifted image
pair (gen-data), train the source model (train-source), adapt it with
channel transforms (adapt) or full finetuning (finetune), evaluate
checkpoints (eval), run shot sweeps (sweep), produce land-cover maps
(map), and verify gradients (gradcheck).

Configuration is key=value lines with dotted keys; command line flags
override file values. Every command writes the resolved configuration
next to its outputs so a run can be reproduced byte for byte. Exit
codes: 0 success, 1 contract violation, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    TEST,
    TRAIN,
    VAL,
    SyntheticShiftConfig,
    LabeledDataset,
    load_folder_dataset,
    save_folder_dataset,
    synth_domain_pair,
    synth_mosaic,
    tile_image,
)
from .errors import ConfigError, ContractError, FtmnetError
from .gradcheck import END_TO_END_TOL, end_to_end_error, run_suite
from .mapping import build_land_cover_map, default_palette, render_map, score_map, votes_to_csv
from .metrics import ConfusionMatrix, cm_scores, cm_to_csv
from .network import build_model, desk_config, reinit_head, resnet34_config
from .training import (
    StageConfig,
    adapt_ftm,
    desk_stage1,
    desk_stage2_ft,
    desk_stage2_ftm,
    evaluate,
    evaluate_coarse,
    finetune_baseline,
    frozen_transfer_accuracy,
    history_to_csv,
    predict_logits,
    run_shot_sweep,
    sample_shots,
    stage1_defaults,
    stage2_ft_defaults,
    stage2_ftm_defaults,
    sweep_to_csv,
    train_source,
)

_SPLITS = {"train": TRAIN, "val": VAL, "test": TEST}


def _read_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    text = Path(path).read_text()
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"malformed config line {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


class Resolver:
    """Merges config-file values with flags and records what was used."""

    def __init__(self, config_path: str | None):
        self.file_values = _read_config_file(config_path) if config_path else {}
        self.resolved: dict[str, str] = {}

    def get(self, key: str, flag_value, default, cast=str):
        if flag_value is not None:
            value = flag_value
        elif key in self.file_values:
            value = cast(self.file_values[key])
        else:
            value = default
        self.resolved[key] = "" if value is None else str(value)
        return value

    def write(self, out_dir: Path) -> None:
        lines = [f"{k}={self.resolved[k]}" for k in sorted(self.resolved)]
        (out_dir / "resolved.cfg").write_text("\n".join(lines) + "\n")


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in str(text).split(",") if v.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# dataset plumbing
# ---------------------------------------------------------------------------


def _synth_config(res: Resolver, args) -> SyntheticShiftConfig:
    """Synthetic-data geometry shared by every command that accepts --data synthetic.

    The defaults (4 coarse families, 2 subclasses, 32 px) are small
    enough for quick runs and satisfy the 4-class mosaic requirement.
    """
    return SyntheticShiftConfig(
        n_source_classes=res.get("data.source_classes", getattr(args, "source_classes", None), 8, int),
        n_target_coarse=res.get("data.coarse", getattr(args, "coarse", None), 4, int),
        subclasses_per_coarse=res.get("data.subs", getattr(args, "subs", None), 2, int),
        image_size=res.get("data.image_size", getattr(args, "image_size", None), 32, int),
        images_per_class=res.get("data.per_class", getattr(args, "per_class", None), 120, int),
        seed=res.get("data.seed", getattr(args, "data_seed", None), 0, int),
    )


def _load_datasets(res: Resolver, args, need: str):
    """Returns (source, target); either may be None depending on `need`."""
    data = res.get("data.kind", args.data, "synthetic")
    if data == "synthetic":
        source, target = synth_domain_pair(_synth_config(res, args))
        return source, target
    root = Path(data)
    tax = root / "taxonomy.txt"
    ds = load_folder_dataset(root, taxonomy_file=tax if tax.exists() else None)
    return (ds, None) if need == "source" else (None, ds)


def _stage_cfg(res: Resolver, args, base: StageConfig, prefix: str) -> StageConfig:
    return replace(
        base,
        epochs=res.get(f"{prefix}.epochs", args.epochs, base.epochs, int),
        batch_size=res.get(f"{prefix}.batch", args.batch, base.batch_size, int),
        base_lr=res.get(f"{prefix}.lr", args.lr, base.base_lr, float),
        lr_step=res.get(f"{prefix}.lr_step", args.lr_step, base.lr_step, int),
        lr_decay=res.get(f"{prefix}.lr_decay", args.lr_decay, base.lr_decay, float),
        seed=res.get(f"{prefix}.seed", args.seed, base.seed, int),
    )


def _meta_classes(model) -> list[str]:
    names = model.meta.get("classes", "")
    out = names.split("|") if names else []
    if len(out) != model.config.num_classes:
        raise ContractError(
            f"checkpoint lists {len(out)} class names for {model.config.num_classes} outputs"
        )
    return out


def _meta_taxonomy(model) -> dict[str, str]:
    raw = model.meta.get("taxonomy", "")
    if not raw:
        return {}
    pairs = {}
    for item in raw.split("|"):
        fine, _, coarse = item.partition("=")
        if not fine or not coarse:
            raise ContractError(f"malformed taxonomy entry {item!r} in checkpoint")
        pairs[fine] = coarse
    return pairs


def _stamp_dataset_meta(model, ds: LabeledDataset) -> None:
    model.meta["classes"] = "|".join(ds.fine_classes)
    model.meta["taxonomy"] = "|".join(f"{f}={ds.taxonomy[f]}" for f in ds.fine_classes)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    res = Resolver(args.config)
    out = _out_dir(args.out)
    cfg = _synth_config(res, args)
    source, target = synth_domain_pair(cfg)
    save_folder_dataset(source, out / "source")
    save_folder_dataset(target, out / "target")
    res.write(out)
    print(f"source: {source.images.shape[0]} images, {source.num_classes} classes -> {out / 'source'}")
    print(f"target: {target.images.shape[0]} images, {target.num_classes} classes -> {out / 'target'}")
    return 0


def _cmd_train_source(args) -> int:
    res = Resolver(args.config)
    out = _out_dir(args.out)
    source, _ = _load_datasets(res, args, need="source")
    arch = res.get("model.arch", args.arch, "desk")
    if arch == "desk":
        cfg = desk_config(num_classes=source.num_classes, image_size=source.image_size)
    elif arch == "resnet34":
        cfg = resnet34_config(num_classes=source.num_classes, image_size=source.image_size)
    else:
        raise ConfigError(f"model.arch must be desk or resnet34, got {arch!r}")
    model_seed = res.get("model.seed", args.seed, 0, int)
    model = build_model(cfg, seed=model_seed)

    preset = res.get("train.preset", args.preset, "desk")
    if preset == "desk":
        base = desk_stage1()
    elif preset == "full":
        base = stage1_defaults()
    else:
        raise ConfigError(f"train.preset must be desk or full, got {preset!r}")
    stage = _stage_cfg(res, args, base, "train")

    trained, history = train_source(model, source, stage)
    _stamp_dataset_meta(trained, source)
    save_checkpoint(trained, out / "source.ckpt")
    history_to_csv(history, out / "history.csv")
    res.write(out)
    last_val = next((h["val_acc"] for h in reversed(history) if h["val_acc"] is not None), None)
    test_idx = source.indices(TEST)
    test_acc = evaluate(trained, source.images[test_idx], source.labels[test_idx]) if test_idx.size else None
    print(f"trained {arch} model on {source.num_classes} classes ({stage.epochs} epochs)")
    if last_val is not None:
        print(f"val_acc={last_val:.4f}")
    if test_acc is not None:
        print(f"test_acc={test_acc:.4f}")
    print(f"checkpoint: {out / 'source.ckpt'}")
    return 0


def _adapt_common(args, method: str) -> int:
    res = Resolver(args.config)
    out = _out_dir(args.out)
    model = load_checkpoint(args.checkpoint)
    _, target = _load_datasets(res, args, need="target")
    shots = res.get("adapt.shots", args.shots, 5, int)
    seed = res.get("adapt.seed", args.seed, 0, int)

    episode = sample_shots(target, shots, seed=seed)
    base = reinit_head(model, target.num_classes, seed=seed)
    if method == "ftm":
        stage = _stage_cfg(res, args, desk_stage2_ftm(), "adapt")
        adapted, history = adapt_ftm(base, episode, stage)
        name = "adapted.ckpt"
    else:
        stage = _stage_cfg(res, args, desk_stage2_ft(), "adapt")
        adapted, history = finetune_baseline(base, episode, stage)
        name = "finetuned.ckpt"

    _stamp_dataset_meta(adapted, target)
    save_checkpoint(adapted, out / name)
    history_to_csv(history, out / "history.csv")
    res.write(out)
    print(f"{method} adaptation with {shots} shots/class over {stage.epochs} epochs")
    print(f"final train_loss={history[-1]['train_loss']:.4f}")
    test_idx = target.indices(TEST)
    if test_idx.size:
        acc = evaluate(adapted, target.images[test_idx], target.labels[test_idx])
        print(f"test_acc={acc:.4f} coarse_acc={evaluate_coarse(adapted, target):.4f}")
    print(f"checkpoint: {out / name}")
    return 0


def _cmd_adapt(args) -> int:
    return _adapt_common(args, "ftm")


def _cmd_finetune(args) -> int:
    return _adapt_common(args, "ft")


def _cmd_eval(args) -> int:
    res = Resolver(args.config)
    model = load_checkpoint(args.checkpoint)
    _, ds = _load_datasets(res, args, need="target")
    if model.config.num_classes != ds.num_classes:
        raise ContractError(
            f"checkpoint head has {model.config.num_classes} classes, dataset has {ds.num_classes}"
        )
    split = _SPLITS[res.get("eval.split", args.split, "test")]
    idx = ds.indices(split)
    if idx.size == 0:
        raise ContractError(f"split {args.split!r} is empty")
    preds = predict_logits(model, ds.images[idx]).argmax(axis=1)
    cm = ConfusionMatrix(ds.fine_classes)
    cm.update_batch(ds.labels[idx], preds)
    scores = cm_scores(cm)
    print(f"n={idx.size} accuracy={scores['accuracy']:.4f} macro_f1={scores['macro_f1']:.4f}")
    if len(ds.coarse_classes) < ds.num_classes:
        print(f"coarse_acc={evaluate_coarse(model, ds, split):.4f}")
    if args.out:
        out = _out_dir(args.out)
        cm_to_csv(cm, out / "confusion.csv")
        res.write(out)
        print(f"confusion matrix: {out / 'confusion.csv'}")
    return 0


def _cmd_sweep(args) -> int:
    res = Resolver(args.config)
    out = _out_dir(args.out)
    model = load_checkpoint(args.checkpoint)
    _, target = _load_datasets(res, args, need="target")
    shots = _ints(res.get("sweep.shots", args.shots, "3,5,10"))
    trials = res.get("sweep.trials", args.trials, 5, int)
    seed = res.get("sweep.seed", args.seed, 0, int)
    preset = res.get("sweep.preset", args.preset, "desk")
    if preset == "desk":
        ftm_cfg, ft_cfg = desk_stage2_ftm(), desk_stage2_ft()
    elif preset == "full":
        ftm_cfg, ft_cfg = stage2_ftm_defaults(), stage2_ft_defaults()
    else:
        raise ConfigError(f"sweep.preset must be desk or full, got {preset!r}")

    rows = run_shot_sweep(model, target, shots, trials, ftm_cfg, ft_cfg, seed=seed)
    sweep_to_csv(rows, out / "sweep.csv")
    res.write(out)
    for row in rows:
        print(
            f"shots={row['shots']} method={row['method']} acc={row['mean_acc']:.4f}+-{row['std_acc']:.4f}"
            f" coarse={row['mean_coarse_acc']:.4f}"
        )
    source_names = _meta_classes(model)
    frozen = frozen_transfer_accuracy(model, source_names, target)
    print(f"frozen source model coarse_acc={frozen:.4f}")
    print(f"table: {out / 'sweep.csv'}")
    return 0


def _cmd_map(args) -> int:
    res = Resolver(args.config)
    out = _out_dir(args.out)
    model = load_checkpoint(args.checkpoint)
    fine_names = _meta_classes(model)
    taxonomy = _meta_taxonomy(model)

    truth = None
    if args.image == "synthetic":
        cfg = _synth_config(res, args)
        size = res.get("map.mosaic_size", args.mosaic_size, 512, int)
        seed = res.get("map.seed", args.seed, 0, int)
        image, truth, truth_names = synth_mosaic(cfg, size=size, seed=seed)
    else:
        arr = np.asarray(Image.open(args.image).convert("RGB"), dtype=np.float32) / 255.0
        image = np.ascontiguousarray(arr.transpose(2, 0, 1))

    level = res.get("map.level", args.level, "coarse" if taxonomy else "fine")
    if level == "coarse":
        if not taxonomy:
            raise ConfigError("checkpoint has no taxonomy metadata; cannot map at coarse level")
        coarse_names: list[str] = []
        for f in fine_names:
            if taxonomy[f] not in coarse_names:
                coarse_names.append(taxonomy[f])
        lut = np.array([coarse_names.index(taxonomy[f]) for f in fine_names], dtype=np.int64)
        names = coarse_names
    elif level == "fine":
        lut, names = None, fine_names
    else:
        raise ConfigError(f"map.level must be fine or coarse, got {level!r}")

    n_segments = res.get("map.superpixels", args.superpixels, 100, int)
    patch = res.get("map.patch", args.patch, 224, int)
    stride = res.get("map.stride", args.stride, patch, int)

    lcm = build_land_cover_map(
        model, image, names, n_segments=n_segments, patch_size=patch, stride=stride, lut=lut
    )
    palette = default_palette(names)
    render_map(lcm.class_raster, names, palette, out / "map.png")
    votes_to_csv(lcm, out / "votes.csv")
    res.write(out)
    print(f"{lcm.segmentation.n_segments} superpixels, {len(names)} classes")
    print(f"map: {out / 'map.png'}")

    if truth is not None:
        if truth_names != names[: len(truth_names)]:
            raise ContractError(f"mosaic classes {truth_names} do not align with map classes {names}")
        grid = tile_image(image, patch, stride)
        scores = score_map(lcm.class_raster, truth, grid, names)
        lines = ["class,f1"]
        for name in names:
            if scores["present"][name]:
                print(f"f1[{name}]={scores['per_class_f1'][name]:.4f}")
                lines.append(f"{name},{scores['per_class_f1'][name]:.6f}")
            else:
                print(f"f1[{name}]=absent")
                lines.append(f"{name},")
        lines.append(f"macro_f1,{scores['macro_f1']:.6f}")
        lines.append(f"accuracy,{scores['accuracy']:.6f}")
        (out / "scores.csv").write_text("\n".join(lines) + "\n")
        print(f"macro_f1={scores['macro_f1']:.4f}")
    return 0


def _cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    errs = run_suite(seed=seed)
    tol = 1e-4
    worst = 0.0
    for name in sorted(errs):
        status = "ok" if errs[name] < tol else "FAIL"
        print(f"{name:32s} {errs[name]:.3e} {status}")
        worst = max(worst, errs[name])
    e2e = end_to_end_error(seed=seed)
    status = "ok" if e2e < END_TO_END_TOL else "FAIL"
    print(f"{'end_to_end':32s} {e2e:.3e} {status}")
    return 0 if worst < tol and e2e < END_TO_END_TOL else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("--seed", type=int, default=None, help="run seed")


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", default=None, help="dataset folder, or 'synthetic' (default)")
    p.add_argument("--data-seed", type=int, default=None, help="synthetic dataset seed")


def _add_stage_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lr-step", type=int, default=None)
    p.add_argument("--lr-decay", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ftmnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", help="synthesize a domain-shifted source/target image pair")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--per-class", type=int, default=None)
    p.add_argument("--source-classes", type=int, default=None)
    p.add_argument("--coarse", type=int, default=None)
    p.add_argument("--subs", type=int, default=None)
    p.add_argument("--data-seed", type=int, default=None)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train-source", help="stage 1: train the full model on the source domain")
    _add_common(p)
    _add_data(p)
    _add_stage_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--arch", choices=["desk", "resnet34"], default=None)
    p.add_argument("--preset", choices=["desk", "full"], default=None)
    p.set_defaults(func=_cmd_train_source)

    for name, help_text in (
        ("adapt", "stage 2: adapt channel transforms + head on a k-shot episode"),
        ("finetune", "baseline: finetune all parameters on a k-shot episode"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        _add_data(p)
        _add_stage_flags(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--shots", type=int, default=None)
        p.set_defaults(func=_cmd_adapt if name == "adapt" else _cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _add_common(p)
    _add_data(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=sorted(_SPLITS), default=None)
    p.add_argument("--out", default=None, help="write confusion.csv here")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="shot sweep comparing adaptation methods")
    _add_common(p)
    _add_data(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--shots", default=None, help="comma-separated shot counts (default 3,5,10)")
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--preset", choices=["desk", "full"], default=None)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("map", help="land-cover map from a checkpoint and a scene image")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="scene PNG path, or 'synthetic' for a mosaic")
    p.add_argument("--out", required=True)
    p.add_argument("--superpixels", type=int, default=None, help="superpixel count (default 100)")
    p.add_argument("--patch", type=int, default=None, help="patch size (default 224)")
    p.add_argument("--stride", type=int, default=None, help="patch stride (default: patch size)")
    p.add_argument("--level", choices=["fine", "coarse"], default=None)
    p.add_argument("--mosaic-size", type=int, default=None)
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--per-class", type=int, default=None)
    p.add_argument("--source-classes", type=int, default=None)
    p.add_argument("--coarse", type=int, default=None)
    p.add_argument("--subs", type=int, default=None)
    p.add_argument("--data-seed", type=int, default=None)
    p.set_defaults(func=_cmd_map)

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive")
    _add_common(p)
    p.add_argument("--dtype", choices=["f64"], default="f64", help="check precision (f64 only)")
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not getattr(args, "command", None):
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except FtmnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, NotADirectoryError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
