"""Command-line front end.

Subcommands wire the pipeline together: gen-data -> curate -> teacher ->
distill -> eval / baseline / export-images / show-history.  Every writing
subcommand leaves a manifest next to its artifact recording the effective
config, the seeds, and content hashes of every input file, so a run can be
reproduced byte for byte from the manifest alone.

Config files are flat ``section.key = value`` lines.  Parsing is strict:
unknown keys, duplicates, type errors, and range violations all fail with
the file, line, and key named.  ``--set key=value`` overrides win over the
file.  The only environment variable honoured is STM_OUTPUT_ROOT, which
re-roots relative output paths.
"""

from __future__ import annotations

import argparse
import glob
import hashlib
import os
import sys

import numpy as np

from . import curate as curate_mod
from . import distill as distill_mod
from . import evaluate as evaluate_mod
from . import teacher as teacher_mod
from .errors import ConfigError, DataError, StmError
from .nets import ArchDescriptor

# ---------------------------------------------------------------------------
# config schema


def _positive(v):
    return v > 0


def _non_negative(v):
    return v >= 0


_TRUE = {"true", "yes", "y", "1"}
_FALSE = {"false", "no", "n", "0"}


def _parse_bool(raw: str):
    low = raw.strip().lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ValueError(f"expected one of {sorted(_TRUE | _FALSE)}, got {raw!r}")


# key -> (type tag, default, constraint fn or None, constraint description)
SCHEMA = {
    "data.size": ("int", 32, lambda v: v in (16, 32), "16 or 32"),
    "data.classes": ("int", 9, lambda v: 2 <= v <= 9, "2..9"),
    "data.noise": ("float", 0.06, lambda v: 0.0 <= v < 0.5, "[0, 0.5)"),
    "data.per_class": ("int", 260, _positive, "> 0"),
    "data.seed": ("int", 0, _non_negative, ">= 0"),

    "curate.k_per_class": ("int", 250, _positive, "> 0"),
    "curate.train_per_class": ("int", 200, _positive, "> 0"),
    "curate.seed": ("int", 1, _non_negative, ">= 0"),
    "curate.rotate_step": ("float", 36.0, None, None),
    "curate.rotate_count": ("int", 0, _non_negative, ">= 0"),

    "arch.depth": ("int", 3, lambda v: 1 <= v <= 4, "1..4"),
    "arch.width": ("int", 16, _positive, "> 0"),
    "arch.norm": ("str", "none", lambda v: v in ("none", "instance"),
                  "none or instance"),

    "teacher.count": ("int", 6, _positive, "> 0"),
    "teacher.seed0": ("int", 0, _non_negative, ">= 0"),
    "teacher.epochs": ("int", 20, _positive, "> 0"),
    "teacher.lr": ("float", 0.05, _positive, "> 0"),
    "teacher.batch_size": ("int", 64, _positive, "> 0"),
    "teacher.momentum": ("float", 0.0, lambda v: 0.0 <= v < 1.0, "[0, 1)"),
    "teacher.augment": ("str", "", None, None),

    "distill.mode": ("str", "stm", lambda v: v in ("stm", "mtt"), "stm or mtt"),
    "distill.ipc": ("int", 1, _positive, "> 0"),
    "distill.n": ("int", 12, _positive, "> 0"),
    "distill.lr_pixels": ("float", 3.0, _positive, "> 0"),
    "distill.alpha_init": ("float", 0.02, _positive, "> 0"),
    "distill.lr_alpha": ("float", 1e-4, _non_negative, ">= 0"),
    "distill.lambda": ("float", 5.0, _positive, "> 0"),
    "distill.max_iter": ("int", 250, _positive, "> 0"),
    "distill.expand_increment": ("int", 1, _positive, "> 0"),
    "distill.zca": ("bool", False, None, None),
    "distill.init": ("str", "real", lambda v: v in ("real", "noise", "top"),
                     "real, noise, or top"),
    "distill.seed": ("int", 0, _non_negative, ">= 0"),
    "distill.t_max": ("int", 3, _positive, "> 0"),
    "distill.m_steps": ("int", 1, _positive, "> 0"),
    "distill.iterations": ("int", 400, _positive, "> 0"),

    "eval.n_nets": ("int", 5, _positive, "> 0"),
    "eval.epochs": ("int", 800, _positive, "> 0"),
    "eval.lr": ("float", 0.0, _non_negative, ">= 0 (0 = learned step size)"),
    "eval.batch_size": ("int", 0, _non_negative, ">= 0 (0 = full batch)"),
    "eval.momentum": ("float", 0.5, lambda v: 0.0 <= v < 1.0, "[0, 1)"),
    "eval.seed": ("int", 100, _non_negative, ">= 0"),
}

_CASTS = {"int": int, "float": float, "str": str, "bool": _parse_bool}


class RunConfig:
    """Validated flat config; values reachable by their dotted keys."""

    def __init__(self, values: dict):
        self.values = values

    def __getitem__(self, key: str):
        return self.values[key]

    def lines(self):
        return [f"{k}={self.values[k]}" for k in sorted(self.values)]

    def arch_for(self, dataset) -> ArchDescriptor:
        c, h, w = dataset.images.shape[1:]
        return ArchDescriptor(self["arch.depth"], self["arch.width"],
                              (c, h, w), dataset.classes, self["arch.norm"])


def _convert(key: str, raw: str, where: str):
    kind, _, check, bounds = SCHEMA[key]
    try:
        value = _CASTS[kind](raw.strip())
    except ValueError:
        raise ConfigError(f"{where}: key '{key}' expects {kind}, got {raw.strip()!r}")
    if check is not None and not check(value):
        raise ConfigError(f"{where}: key '{key}' must be {bounds}, got {value!r}")
    return value


def parse_config(path: str | None, overrides=()) -> RunConfig:
    """Load ``key = value`` lines, apply overrides, validate everything."""
    values = {k: default for k, (_, default, _, _) in SCHEMA.items()}
    seen = set()
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                text = line.split("#", 1)[0].strip()
                if not text:
                    continue
                where = f"{path}:{lineno}"
                if "=" not in text:
                    raise ConfigError(f"{where}: expected key=value, got {text!r}")
                key, raw = (part.strip() for part in text.split("=", 1))
                if key not in SCHEMA:
                    raise ConfigError(f"{where}: unknown key '{key}'")
                if key in seen:
                    raise ConfigError(f"{where}: duplicate key '{key}'")
                seen.add(key)
                values[key] = _convert(key, raw, where)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, raw = (part.strip() for part in item.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"override: unknown key '{key}'")
        values[key] = _convert(key, raw, f"override '{key}'")
    return RunConfig(values)


# ---------------------------------------------------------------------------
# manifests


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(path: str, command: str, config: RunConfig,
                    inputs: dict, outputs: list):
    lines = [f"command={command}"]
    lines += [f"config.{line}" for line in config.lines()]
    for name in sorted(inputs):
        lines.append(f"input.{name}.path={inputs[name]}")
        lines.append(f"input.{name}.sha256={_sha256(inputs[name])}")
    for i, out in enumerate(outputs):
        lines.append(f"output.{i}={out}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _out_path(raw: str) -> str:
    root = os.environ.get("STM_OUTPUT_ROOT", "")
    if root and not os.path.isabs(raw):
        return os.path.join(root, raw)
    return raw


def _manifest_for(artifact: str) -> str:
    return artifact + ".manifest.txt"


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_data(args) -> int:
    cfg = parse_config(args.config, args.set or ())
    spec = curate_mod.GeneratorSpec(cfg["data.size"], cfg["data.classes"],
                                    cfg["data.noise"])
    ds = curate_mod.generate_synthetic(spec, cfg["data.per_class"], cfg["data.seed"])
    out = _out_path(args.out)
    curate_mod.save_dataset(ds, out)
    _write_manifest(_manifest_for(out), "gen-data", cfg, {}, [out])
    print(f"wrote {out} ({ds.n} images, {ds.classes} classes)")
    return 0


def _cmd_curate(args) -> int:
    cfg = parse_config(args.config, args.set or ())
    full = curate_mod.load_dataset(args.input)
    cur = curate_mod.curate_topk(full, cfg["curate.k_per_class"],
                                 cfg["curate.train_per_class"], cfg["curate.seed"])
    if cfg["curate.rotate_count"] > 0:
        train = curate_mod.rotate_augment(cur.part("train"),
                                          cfg["curate.rotate_step"],
                                          cfg["curate.rotate_count"])
        test = cur.part("test")
        cur = curate_mod.LabeledDataset(
            np.concatenate([train.images, test.images]),
            np.concatenate([train.labels, test.labels]),
            np.concatenate([train.confidence, test.confidence]),
            np.concatenate([train.split, test.split]))
    out = _out_path(args.out)
    curate_mod.save_dataset(cur, out)
    _write_manifest(_manifest_for(out), "curate", cfg, {"dataset": args.input}, [out])
    print(f"wrote {out} ({cur.part('train').n} train / {cur.part('test').n} test)")
    return 0


def _cmd_teacher(args) -> int:
    cfg = parse_config(args.config, args.set or ())
    ds = curate_mod.load_dataset(args.data)
    train = ds.part("train")
    if train.n == 0:
        raise DataError("dataset has no train rows; run curate first")
    arch = cfg.arch_for(train)
    ops = tuple(s for s in cfg["teacher.augment"].split(",") if s)
    train_input = train
    if cfg["distill.zca"]:
        # teachers must see the same input space the students will be
        # unrolled in, or the matched trajectories mean nothing
        t = teacher_mod.zca_fit(train.images)
        train_input = (teacher_mod.zca_apply(t, train.images), train.labels)
    out_dir = _out_path(args.out)
    os.makedirs(out_dir, exist_ok=True)
    outputs = []
    for k in range(cfg["teacher.count"]):
        seed = cfg["teacher.seed0"] + k
        buf = teacher_mod.train_teacher(
            train_input, arch, epochs=cfg["teacher.epochs"], lr=cfg["teacher.lr"],
            batch_size=cfg["teacher.batch_size"], seed=seed,
            momentum=cfg["teacher.momentum"], augment_ops=ops)
        buf.meta["zca"] = "1" if cfg["distill.zca"] else "0"
        path = os.path.join(out_dir, f"teacher_seed{seed}.stmt")
        teacher_mod.save_trajectory(buf, path)
        outputs.append(path)
        print(f"teacher seed {seed}: final train acc "
              f"{buf.meta['final_train_accuracy']} -> {path}")
    _write_manifest(os.path.join(out_dir, "manifest.txt"), "teacher", cfg,
                    {"dataset": args.data}, outputs)
    return 0


def _load_teachers(directory: str):
    paths = sorted(glob.glob(os.path.join(directory, "*.stmt")))
    if not paths:
        raise DataError(f"no .stmt trajectory files in {directory}")
    first = teacher_mod.load_trajectory(paths[0])
    bufs = [first] + [teacher_mod.load_trajectory(p, expected_arch=first.arch)
                      for p in paths[1:]]
    return bufs, paths


def _whitened_source(cfg: RunConfig, ds):
    """Fit ZCA on the train rows and whiten the whole dataset for picking
    and evaluation.  Refit from the dataset file is deterministic, so the
    transform never needs serializing."""
    train = ds.part("train")
    t = teacher_mod.zca_fit(train.images)
    white = teacher_mod.zca_apply(t, ds.images)
    # whitened pixels leave [0,1]; bypass container revalidation by shifting
    # into the synthetic pipeline's native tensors instead
    return t, white


def _cmd_distill(args) -> int:
    cfg = parse_config(args.config, args.set or ())
    ds = curate_mod.load_dataset(args.data)
    bufs, traj_paths = _load_teachers(args.teachers)
    want = "1" if cfg["distill.zca"] else "0"
    for p, b in zip(traj_paths, bufs):
        if b.meta.get("zca", "0") != want:
            have = "whitened" if b.meta.get("zca", "0") == "1" else "raw"
            raise ConfigError(
                f"{p}: teacher was trained on {have} pixels but distill.zca="
                f"{'true' if cfg['distill.zca'] else 'false'}; retrain the "
                f"teachers with the same distill.zca setting")
    arch = bufs[0].arch
    shape = arch.input_shape
    classes = arch.classes

    from . import autodiff as ad
    if cfg["distill.zca"]:
        _, white = _whitened_source(cfg, ds)
        source_images = white
    else:
        source_images = ds.images
    if cfg["distill.init"] in ("real", "top"):
        rng = np.random.Generator(np.random.PCG64(cfg["distill.seed"]))
        picks = []
        for cls in range(classes):
            (members,) = np.nonzero((ds.labels == cls) & (ds.split == curate_mod.TRAIN))
            if members.size < cfg["distill.ipc"]:
                raise DataError(f"class {cls} has {members.size} train images, "
                                f"need {cfg['distill.ipc']}")
            if cfg["distill.init"] == "real":
                picks.append(rng.choice(members, size=cfg["distill.ipc"],
                                        replace=False))
            else:
                order = members[np.argsort(-ds.confidence[members], kind="stable")]
                picks.append(order[:cfg["distill.ipc"]])
        sel = np.concatenate(picks)
        images = ad.Tensor(source_images[sel].astype(np.float32))
        labels = np.repeat(np.arange(classes, dtype=np.int32), cfg["distill.ipc"])
        syn0 = distill_mod.SyntheticDataset(images, labels, cfg["distill.alpha_init"])
    else:
        syn0 = distill_mod.init_synthetic(classes, cfg["distill.ipc"], shape,
                                          "noise", cfg["distill.seed"],
                                          cfg["distill.alpha_init"])

    if cfg["distill.mode"] == "stm":
        syn, state, hist = distill_mod.run_stm(
            bufs, syn0, n_steps=cfg["distill.n"],
            lr_pixels=cfg["distill.lr_pixels"], lr_alpha=cfg["distill.lr_alpha"],
            seed=cfg["distill.seed"], lam=cfg["distill.lambda"],
            max_iter=cfg["distill.max_iter"],
            expand_increment=cfg["distill.expand_increment"],
            log_every=args.log_every)
    else:
        state = None
        syn, hist = distill_mod.run_mtt(
            bufs, syn0, iterations=cfg["distill.iterations"],
            t_max=cfg["distill.t_max"], m_steps=cfg["distill.m_steps"],
            n_steps=cfg["distill.n"], lr_pixels=cfg["distill.lr_pixels"],
            lr_alpha=cfg["distill.lr_alpha"], seed=cfg["distill.seed"])

    out = _out_path(args.out)
    meta = {
        "mode": cfg["distill.mode"],
        "zca": "1" if cfg["distill.zca"] else "0",
        "dataset_sha256": _sha256(args.data),
        "alpha_final": repr(syn.alpha),
    }
    distill_mod.save_checkpoint(out, syn, state, hist, meta=meta)
    inputs = {"dataset": args.data}
    inputs.update({f"trajectory{i}": p for i, p in enumerate(traj_paths)})
    _write_manifest(_manifest_for(out), "distill", cfg, inputs, [out])
    tail = hist.rows[-1] if hist.rows else {}
    print(f"wrote {out} (steps={len(hist.rows)} "
          f"T={tail.get('T', '?')} alpha={syn.alpha:.5f}"
          + (f" warning={hist.warning!r}" if hist.warning else "") + ")")
    return 0


def _eval_config(cfg: RunConfig) -> evaluate_mod.TrainConfig:
    lr = cfg["eval.lr"]
    return evaluate_mod.TrainConfig(epochs=cfg["eval.epochs"],
                                    lr=None if lr == 0 else lr,
                                    batch_size=cfg["eval.batch_size"],
                                    momentum=cfg["eval.momentum"])


def _test_arrays(cfg: RunConfig, ds):
    test = ds.part("test")
    if test.n == 0:
        raise DataError("dataset has no test rows; run curate first")
    if cfg["distill.zca"]:
        t, _ = _whitened_source(cfg, ds)
        return teacher_mod.zca_apply(t, test.images), test.labels
    return test.images, test.labels


def _cmd_eval(args) -> int:
    cfg = parse_config(args.config, args.set or ())
    ds = curate_mod.load_dataset(args.data)
    syn, _, _, meta = distill_mod.load_checkpoint(args.syn)
    if meta.get("zca", "0") == "1" and not cfg["distill.zca"]:
        raise ConfigError("checkpoint was distilled in whitened space; "
                          "set distill.zca=true so evaluation matches")
    test_images, test_labels = _test_arrays(cfg, ds)
    arch = ArchDescriptor(cfg["arch.depth"], cfg["arch.width"],
                          tuple(syn.images.shape[1:]), int(test_labels.max()) + 1,
                          cfg["arch.norm"])
    rep = evaluate_mod.evaluate(syn, test_images, test_labels, arch,
                                cfg["eval.n_nets"], _eval_config(cfg),
                                seed=cfg["eval.seed"])
    report = rep.row("distilled")
    out = _out_path(args.out)
    with open(out, "w") as fh:
        fh.write(report + "\n")
        fh.write(f"accuracies={','.join(f'{a:.4f}' for a in rep.accuracies)}\n")
        fh.write(f"lr_used={rep.lr_used}\nfingerprint={rep.fingerprint}\n")
    _write_manifest(_manifest_for(out), "eval", cfg,
                    {"dataset": args.data, "checkpoint": args.syn}, [out])
    print(report)
    return 0


def _cmd_baseline(args) -> int:
    cfg = parse_config(args.config, args.set or ())
    if cfg["eval.lr"] <= 0:
        raise ConfigError("baseline evaluation needs an explicit eval.lr > 0 "
                          "(real images carry no learned step size)")
    ds = curate_mod.load_dataset(args.data)
    picks = evaluate_mod.random_baseline(ds, cfg["distill.ipc"], cfg["distill.seed"])
    test_images, test_labels = _test_arrays(cfg, ds)
    arch = ArchDescriptor(cfg["arch.depth"], cfg["arch.width"],
                          tuple(ds.images.shape[1:]), int(ds.labels.max()) + 1,
                          cfg["arch.norm"])
    candidate = picks
    if cfg["distill.zca"]:
        # whiten the picked images the same way the distilled set was; the
        # container only allows [0,1] pixels, so hand them over as tensors
        from . import autodiff as ad
        t, _ = _whitened_source(cfg, ds)
        candidate = distill_mod.SyntheticDataset(
            ad.Tensor(teacher_mod.zca_apply(t, picks.images)), picks.labels,
            cfg["eval.lr"])
    rep = evaluate_mod.evaluate(candidate, test_images, test_labels, arch,
                                cfg["eval.n_nets"], _eval_config(cfg),
                                seed=cfg["eval.seed"])
    report = rep.row("random")
    out = _out_path(args.out)
    with open(out, "w") as fh:
        fh.write(report + "\n")
        fh.write(f"accuracies={','.join(f'{a:.4f}' for a in rep.accuracies)}\n")
        fh.write(f"lr_used={rep.lr_used}\nfingerprint={rep.fingerprint}\n")
    _write_manifest(_manifest_for(out), "baseline", cfg, {"dataset": args.data}, [out])
    print(report)
    return 0


# ---------------------------------------------------------------------------
# image export


def _to_u8(img: np.ndarray):
    """Per-image min-max mapping to [0, 255]; constant images map to 128."""
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        return np.full(img.shape, 128, dtype=np.uint8), lo, hi
    scaled = np.round((img - lo) / (hi - lo) * 255.0)
    return scaled.astype(np.uint8), lo, hi


def _to_rgb_rows(u8: np.ndarray) -> np.ndarray:
    # [C,H,W] -> [H,W,3]
    if u8.shape[0] == 1:
        return np.repeat(u8[0][:, :, None], 3, axis=2)
    if u8.shape[0] == 3:
        return np.moveaxis(u8, 0, 2)
    raise DataError(f"cannot export images with {u8.shape[0]} channels")


def _write_ppm(path: str, rgb: np.ndarray):
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def _write_png(path: str, rgb: np.ndarray):
    from PIL import Image

    Image.fromarray(rgb, mode="RGB").save(path)


def _cmd_export_images(args) -> int:
    syn, _, _, meta = distill_mod.load_checkpoint(args.syn)
    images = syn.images.array
    if meta.get("zca", "0") == "1":
        if not args.data:
            raise ConfigError("checkpoint was distilled in whitened space; "
                              "pass --data so the whitening can be inverted")
        ds = curate_mod.load_dataset(args.data)
        t = teacher_mod.zca_fit(ds.part("train").images)
        images = teacher_mod.zca_invert(t, images)
    labels = syn.labels
    classes = int(labels.max()) + 1
    out_dir = _out_path(args.out)
    os.makedirs(out_dir, exist_ok=True)

    gutter = 2
    outputs, mapping, row_pixels = [], [], []
    for cls in range(classes):
        (members,) = np.nonzero(labels == cls)
        tiles = []
        for j, idx in enumerate(members):
            u8, lo, hi = _to_u8(images[idx])
            rgb = _to_rgb_rows(u8)
            mapping.append((f"class{cls}.png", cls, j, lo, hi))
            tiles.append(rgb)
            if j < len(members) - 1:
                tiles.append(np.zeros((rgb.shape[0], gutter, 3), dtype=np.uint8))
        row = np.concatenate(tiles, axis=1)
        row_pixels.append(row)
        for ext, writer in ((".png", _write_png), (".ppm", _write_ppm)):
            path = os.path.join(out_dir, f"class{cls}{ext}")
            writer(path, row)
            outputs.append(path)

    width = max(r.shape[1] for r in row_pixels)
    padded = [np.pad(r, ((0, 0), (0, width - r.shape[1]), (0, 0))) for r in row_pixels]
    grid_parts = []
    for i, row in enumerate(padded):
        grid_parts.append(row)
        if i < len(padded) - 1:
            grid_parts.append(np.zeros((gutter, width, 3), dtype=np.uint8))
    grid = np.concatenate(grid_parts, axis=0)
    for ext, writer in ((".png", _write_png), (".ppm", _write_ppm)):
        path = os.path.join(out_dir, f"grid{ext}")
        writer(path, grid)
        outputs.append(path)

    sidecar = os.path.join(out_dir, "mapping.csv")
    with open(sidecar, "w") as fh:
        fh.write("file,class,column,min,max\n")
        for fn, cls, j, lo, hi in mapping:
            fh.write(f"{fn},{cls},{j},{lo!r},{hi!r}\n")
    outputs.append(sidecar)
    print(f"exported {classes} class rows + grid to {out_dir}")
    return 0


def _cmd_show_history(args) -> int:
    _, state, hist, meta = distill_mod.load_checkpoint(args.syn)
    print("step iter    t    T buf    train      val    alpha")
    for r in hist.rows:
        print(f"{r['step']:4d} {r['iter']:4d} {r['t']:4d} {r['T']:4d} "
              f"{r['buffer']:3d} {r['train']:8.4f} {r['val']:8.4f} {r['alpha']:8.5f}")
    for step, new_t in hist.expansions:
        print(f"expansion at step {step}: pool grew to T={new_t}")
    if hist.warning:
        print(f"warning: {hist.warning}")
    if state is not None:
        print(f"resumable: iter={state.iter}/{state.max_iter} "
              f"T={state.T} step_count={state.step_count}")
    if meta:
        for k in sorted(meta):
            print(f"meta {k}={meta[k]}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def _add_common(sub, config=True, out=True):
    if config:
        sub.add_argument("-c", "--config", default=None,
                         help="key=value config file (defaults apply if omitted)")
        sub.add_argument("--set", action="append", metavar="KEY=VALUE",
                         help="override a config key (repeatable)")
    if out:
        sub.add_argument("-o", "--out", required=True, help="output path")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stm", description=__doc__.split("\n")[0])
    subs = p.add_subparsers(dest="command", required=True)

    s = subs.add_parser("gen-data", help="write a synthetic labeled dataset")
    _add_common(s)
    s.set_defaults(fn=_cmd_gen_data)

    s = subs.add_parser("curate", help="top-k confidence curation and split")
    _add_common(s)
    s.add_argument("--in", dest="input", required=True, help="input dataset (.stmd)")
    s.set_defaults(fn=_cmd_curate)

    s = subs.add_parser("teacher", help="train teacher trajectories")
    _add_common(s)
    s.add_argument("--data", required=True, help="curated dataset (.stmd)")
    s.set_defaults(fn=_cmd_teacher)

    s = subs.add_parser("distill", help="run trajectory-matching distillation")
    _add_common(s)
    s.add_argument("--data", required=True, help="curated dataset (.stmd)")
    s.add_argument("--teachers", required=True, help="directory of .stmt files")
    s.add_argument("--log-every", type=int, default=0,
                   help="print a progress line every K steps")
    s.set_defaults(fn=_cmd_distill)

    s = subs.add_parser("eval", help="score a distilled set on the test split")
    _add_common(s)
    s.add_argument("--data", required=True, help="curated dataset (.stmd)")
    s.add_argument("--syn", required=True, help="distillation checkpoint (.stms)")
    s.set_defaults(fn=_cmd_eval)

    s = subs.add_parser("baseline", help="score a random real-image subset")
    _add_common(s)
    s.add_argument("--data", required=True, help="curated dataset (.stmd)")
    s.set_defaults(fn=_cmd_baseline)

    s = subs.add_parser("export-images", help="write distilled images as PNG/PPM")
    _add_common(s, config=False)
    s.add_argument("--syn", required=True, help="distillation checkpoint (.stms)")
    s.add_argument("--data", default=None,
                   help="dataset for inverting whitening, if the run used it")
    s.set_defaults(fn=_cmd_export_images)

    s = subs.add_parser("show-history", help="print a checkpoint's run log")
    _add_common(s, config=False, out=False)
    s.add_argument("--syn", required=True, help="distillation checkpoint (.stms)")
    s.set_defaults(fn=_cmd_show_history)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (StmError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
