"""Command-line entry point.

Every command ends with one status line on stdout::

    status=ok command=pipeline exit=0 out=runs/pipeline
    status=error command=eval exit=2 kind=MissingFileError message="..."

Exit codes: 0 success, 1 usage or configuration error, 2 data or checkpoint
error, 3 numerical abort (non-finite loss, failed gradient check).

Config files are YAML. ``--set key.path=value`` overrides scalar fields;
list items are addressed by index (``stages.0.iterations=50``).
"""

import argparse
import copy
import csv
import json
import logging
import os
import sys

import numpy as np
import yaml

from . import audio
from .checkpoint import load_checkpoint, save_checkpoint
from .datasets import (SynthAudioSpec, SynthSpec, load_manifest, save_dataset, save_waveforms,
                       synth_audio, synth_generate, synth_waveforms, train_val_split)
from .errors import (CheckpointError, ConfigError, ContractError, DataError, DimensionError,
                     DivergenceError, JointXferError, PipelineError, TooShortError)
from .evaluation import cross_corpus_table, evaluate
from .gradcheck import run_suite
from .network import DESK_ARCH, ArchConfig
from .training import StageSpec, run_pipeline, run_stage

OUTPUT_ENV = "JOINTXFER_OUTPUT_ROOT"
COMMANDS = ("pretrain", "finetune", "joint-train", "pipeline", "features", "synth", "eval",
            "gradcheck")
STAGE_KIND = {"pretrain": "pretrain", "finetune": "finetune", "joint-train": "joint"}

log = logging.getLogger("jointxfer")


class UsageError(JointXferError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

def load_config(path):
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ConfigError(f"config file {path} not found")
    with open(path) as fh:
        try:
            cfg = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: cannot parse YAML: {exc}") from exc
    if cfg is None:
        return {}
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return cfg


def apply_override(cfg, assignment):
    """Set a scalar at a dotted path; the parent container must exist."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, raw = assignment.split("=", 1)
    value = yaml.safe_load(raw) if raw else ""
    if isinstance(value, (dict, list)):
        raise ConfigError(f"override {key}: only scalar values can be overridden")
    parts = key.split(".")
    node = cfg
    for i, part in enumerate(parts[:-1]):
        if isinstance(node, list):
            try:
                node = node[int(part)]
            except (ValueError, IndexError):
                raise ConfigError(f"override {key}: no list item {part!r}") from None
        else:
            if part not in node:
                node[part] = {}
            node = node[part]
        if not isinstance(node, (dict, list)):
            raise ConfigError(f"override {key}: {'.'.join(parts[:i + 1])} is a scalar")
    last = parts[-1]
    if isinstance(node, list):
        try:
            idx = int(last)
            old = node[idx]
        except (ValueError, IndexError):
            raise ConfigError(f"override {key}: no list item {last!r}") from None
        if isinstance(old, (dict, list)):
            raise ConfigError(f"override {key}: target is not a scalar field")
        node[idx] = value
    else:
        if isinstance(node.get(last), (dict, list)):
            raise ConfigError(f"override {key}: target is not a scalar field")
        node[last] = value
    return cfg


def output_dir(args, cfg):
    if args.out:
        return args.out
    if cfg.get("output_dir"):
        return str(cfg["output_dir"])
    root = os.environ.get(OUTPUT_ENV, "runs")
    return os.path.join(root, args.command)


def arch_from(cfg):
    spec = cfg.get("arch")
    if spec is None or spec == "desk":
        return DESK_ARCH
    if spec == "full":
        return ArchConfig()
    if not isinstance(spec, dict):
        raise ConfigError("arch: expected 'desk', 'full' or a mapping of fields")
    return ArchConfig.from_dict({**DESK_ARCH.to_dict(), **spec})


def _resolve(path, base):
    return path if os.path.isabs(path) else os.path.join(base, path)


def build_dataset(name, spec, base_dir):
    """One dataset from a config entry.

    ``{manifest: path}`` loads a CSV manifest; ``{synth: visual, domain: A|B,
    seed, per_class, shift, noise}`` or ``{synth: audio, seed, variant,
    per_class, shift, noise}`` generate synthetic data in memory. An optional
    ``split: train|val`` (with ``fold``, ``k``, ``split_seed``) keeps one side
    of a grouped k-fold split.
    """
    if not isinstance(spec, dict):
        raise ConfigError(f"datasets.{name}: expected a mapping")
    spec = dict(spec)
    split = spec.pop("split", None)
    fold, k = int(spec.pop("fold", 0)), int(spec.pop("k", 5))
    split_seed = int(spec.pop("split_seed", 0))
    ds = _build_full(name, spec, base_dir)
    if split is None:
        return ds
    if split not in ("train", "val"):
        raise ConfigError(f"datasets.{name}.split: must be train or val")
    train, val = train_val_split(ds, k, fold, split_seed)
    out = train if split == "train" else val
    out.name = name
    return out


def _build_full(name, spec, base_dir):
    if "manifest" in spec:
        return load_manifest(_resolve(str(spec["manifest"]), base_dir), name=name)
    kind = spec.get("synth")
    fields = {k: v for k, v in spec.items() if k not in ("synth", "seed", "domain", "variant")}
    seed = int(spec.get("seed", 0))
    try:
        if kind == "visual":
            domain = spec.get("domain", "A")
            if domain not in ("A", "B"):
                raise ConfigError(f"datasets.{name}.domain: must be A or B")
            a, b = synth_generate(SynthSpec(**fields), seed)
            ds = a if domain == "A" else b
            ds.name = name
            return ds
        if kind == "audio":
            return synth_audio(SynthAudioSpec(**fields), seed, name,
                               int(spec.get("variant", 0)))
    except TypeError as exc:
        raise ConfigError(f"datasets.{name}: {exc}") from None
    raise ConfigError(f"datasets.{name}: need 'manifest' or synth: visual|audio")


def load_datasets(cfg, names, base_dir):
    specs = cfg.get("datasets") or {}
    missing = [n for n in names if n not in specs]
    if missing:
        raise ConfigError(f"datasets: no entry for {missing}")
    return {n: build_dataset(n, specs[n], base_dir) for n in names}


def stage_from(entry, defaults, arch, index=None):
    where = "stage" if index is None else f"stages.{index}"
    if not isinstance(entry, dict):
        raise ConfigError(f"{where}: expected a mapping")
    d = {**defaults, **entry}
    d.setdefault("arch", arch)
    try:
        return StageSpec.from_dict(d)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _write_text(path, text):
    with open(path, "w") as fh:
        fh.write(text)


def _metrics_csv(rows):
    lines = ["model,dataset,head,n,accuracy,war,uar"]
    for model, dname, head, m in rows:
        lines.append(f"{model},{dname},{head},{m.n},{m.accuracy!r},{m.war!r},{m.uar!r}")
    return "\n".join(lines) + "\n"


def cmd_stage(args, cfg, base_dir, out):
    kind = STAGE_KIND[args.command]
    entry = copy.deepcopy(cfg.get("stage") or {})
    entry.setdefault("name", args.command)
    entry["kind"] = kind
    if args.init:
        entry["init"] = args.init
    st = stage_from(entry, cfg.get("defaults") or {}, arch_from(cfg))
    datasets = load_datasets(cfg, st.datasets, base_dir)
    init = parent = None
    if st.init != "fresh":
        path = _resolve(st.init, base_dir) if not os.path.exists(st.init) else st.init
        init, _ = load_checkpoint(path, expected_arch=st.arch)
        parent = st.init
    ck = run_stage(st, datasets, init, parent)
    os.makedirs(out, exist_ok=True)
    stem = os.path.join(out, st.name)
    save_checkpoint(ck.params, ck.meta, stem + ".ckpt")
    ck.log.write_csv(stem + ".log.csv")
    heads = [st.head] if kind != "joint" else [1, 2]
    rows = [(st.name, n, h, evaluate(ck.params, ds, h))
            for h, (n, ds) in zip(heads, datasets.items())]
    _write_text(stem + ".metrics.csv", _metrics_csv(rows))
    for _, n, h, m in rows:
        print(f"{st.name} on {n} (head {h}): train accuracy {m.accuracy:.4f}")
    return {"checkpoint": stem + ".ckpt"}


def _eval_heads(stage):
    """Head per dataset: joint stages score their i-th dataset with head i."""
    if stage.kind == "joint":
        return {stage.datasets[0]: 1, stage.datasets[1]: 2}
    return {n: stage.head for n in stage.datasets}


def cmd_pipeline(args, cfg, base_dir, out):
    entries = cfg.get("stages")
    if not isinstance(entries, list):
        raise ConfigError("stages: expected a list")
    arch = arch_from(cfg)
    defaults = cfg.get("defaults") or {}
    stages = [stage_from(e, defaults, arch, i) for i, e in enumerate(entries)]
    names = list(dict.fromkeys(n for s in stages for n in s.datasets))
    eval_names = list((cfg.get("evaluate") or {}).get("datasets") or names)
    datasets = load_datasets(cfg, list(dict.fromkeys(names + eval_names)), base_dir)
    os.makedirs(out, exist_ok=True)
    results = run_pipeline(stages, datasets, out)
    if not stages:
        return {"checkpoints": 0}
    overrides = (cfg.get("evaluate") or {}).get("heads") or {}
    models = {}
    for st, ck in zip(stages, results):
        heads = {**_eval_heads(st), **(overrides.get(st.name) or {})}
        models[st.name] = (ck.params, {n: int(heads.get(n, 1)) for n in eval_names})
        if args.both_heads:
            models[st.name + "/h2"] = (ck.params, 2)
    table = cross_corpus_table(models, {n: datasets[n] for n in eval_names})
    _write_text(os.path.join(out, "cross_corpus.csv"), table.to_csv())
    _write_text(os.path.join(out, "cross_corpus.txt"), table.to_text())
    print(table.to_text(), end="")
    return {"checkpoints": len(results)}


def cmd_features(args, cfg, base_dir, out):
    if not args.manifest:
        raise UsageError("features needs --manifest")
    path = args.manifest
    if not os.path.exists(path):
        raise DataError(f"manifest {path} not found")
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh)][1:]
    base = os.path.dirname(os.path.abspath(path))
    os.makedirs(out, exist_ok=True)
    total = skipped = 0
    for line, row in enumerate(rows, start=2):
        if not row or not row[0].strip():
            continue
        rel = row[0].strip()
        full = os.path.join(base, rel)
        if not os.path.exists(full):
            raise DataError(f"{path}: line {line}: file {rel} not found")
        try:
            segs = audio.extract_segments(audio.read_wav(full), utterance_id=rel)
        except TooShortError as exc:
            log.warning("%s: line %d: skipping utterance: %s", path, line, exc)
            skipped += 1
            continue
        except DataError as exc:
            raise DataError(f"{path}: line {line}: {exc}") from exc
        target = os.path.join(out, os.path.splitext(rel)[0] + ".seg")
        os.makedirs(os.path.dirname(target), exist_ok=True)
        audio.save_segment_cache(target, segs)
        total += len(segs)
        print(f"{rel}: {len(segs)} segments")
    return {"segments": total, "skipped": skipped}


def cmd_synth(args, cfg, base_dir, out):
    spec = SynthSpec(per_class=args.per_class, shift=args.shift, noise=args.noise)
    a, b = synth_generate(spec, args.seed)
    sizes = {}
    for tag, ds in (("A", a), ("B", b)):
        save_dataset(ds, os.path.join(out, f"visual_{tag}"))
        sizes[f"visual_{tag}"] = len(ds)
        print(f"visual_{tag}: {len(ds)} samples -> {os.path.join(out, f'visual_{tag}')}")
    if args.audio:
        for tag, variant, shift in (("B", 0, 0.0), ("C", 1, args.shift)):
            items = synth_waveforms(SynthAudioSpec(per_class=args.audio_per_class, shift=shift),
                                    args.seed, variant)
            save_waveforms(items, os.path.join(out, f"audio_{tag}"))
            sizes[f"audio_{tag}"] = len(items)
            print(f"audio_{tag}: {len(items)} utterances -> {os.path.join(out, f'audio_{tag}')}")
    return sizes


def cmd_eval(args, cfg, base_dir, out):
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint")
    params, meta = load_checkpoint(args.checkpoint)
    if args.manifest:
        datasets = {os.path.basename(os.path.dirname(os.path.abspath(args.manifest))) or "data":
                    load_manifest(args.manifest)}
    else:
        names = list((cfg.get("evaluate") or {}).get("datasets") or (cfg.get("datasets") or {}))
        if not names:
            raise UsageError("eval needs --manifest or datasets in the config")
        datasets = load_datasets(cfg, names, base_dir)
    heads = [1, 2] if args.head == "both" else [int(args.head)]
    name = meta.get("stage", "model")
    rows = []
    for dname, ds in datasets.items():
        for h in heads:
            m = evaluate(params, ds, h)
            rows.append((name, dname, h, m))
            print(f"{name} on {dname} (head {h}): accuracy {m.accuracy:.4f} "
                  f"war {m.war:.4f} uar {m.uar:.4f} n={m.n}")
    os.makedirs(out, exist_ok=True)
    _write_text(os.path.join(out, "metrics.csv"), _metrics_csv(rows))
    return {"cells": len(rows)}


def cmd_gradcheck(args, cfg, base_dir, out):
    results = run_suite(seeds=args.seeds)
    for r in results:
        flag = "ok" if r.passed else "FAIL"
        print(f"{r.name:14s} max_rel_err={r.max_error:.3e} tol={r.tolerance:.0e} {flag}")
    worst = max(r.max_error for r in results)
    bad = [r.name for r in results if not r.passed or r.max_error >= 1e-4]
    if bad:
        raise DivergenceError(f"gradient check failed for {bad}")
    return {"max_rel_err": f"{worst:.3e}"}


HANDLERS = {"pretrain": cmd_stage, "finetune": cmd_stage, "joint-train": cmd_stage,
            "pipeline": cmd_pipeline, "features": cmd_features, "synth": cmd_synth,
            "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def build_parser():
    p = _Parser(prog="jointxfer", description="Joint cross-domain emotion recognition "
                "training stack (numpy).")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("-c", "--config", help="YAML config file")
    p.add_argument("-s", "--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a scalar config field (repeatable)")
    p.add_argument("-o", "--out", help=f"output directory (default: ${OUTPUT_ENV}/<command> "
                   "or runs/<command>)")
    p.add_argument("--init", help="checkpoint to start from (finetune, joint-train)")
    p.add_argument("--checkpoint", help="checkpoint to evaluate (eval)")
    p.add_argument("--manifest", help="manifest CSV (eval, features)")
    p.add_argument("--head", default="1", choices=["1", "2", "both"], help="head for eval")
    p.add_argument("--both-heads", action="store_true",
                   help="pipeline: also score every model through head 2")
    p.add_argument("--seed", type=int, default=0, help="synth seed")
    p.add_argument("--per-class", type=int, default=40, help="synth visual samples per class")
    p.add_argument("--shift", type=float, default=0.5, help="synth domain shift")
    p.add_argument("--noise", type=float, default=SynthSpec.noise, help="synth sample noise")
    p.add_argument("--audio", action="store_true", help="synth: also write audio corpora")
    p.add_argument("--audio-per-class", type=int, default=12)
    p.add_argument("--seeds", type=int, default=20, help="gradcheck seeds per check")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _exit_code(exc):
    root = exc.__cause__ if isinstance(exc, PipelineError) and exc.__cause__ else exc
    if isinstance(root, (UsageError, ConfigError, ContractError)):
        return 1
    if isinstance(root, (DataError, CheckpointError, DimensionError)):
        return 2
    if isinstance(root, (DivergenceError, FloatingPointError)):
        return 3
    return 1


def _status(fields):
    parts = []
    for k, v in fields.items():
        s = str(v)
        if not s or any(c in s for c in ' "=\n'):
            s = json.dumps(s)
        parts.append(f"{k}={s}")
    return " ".join(parts)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    command = next((a for a in argv if a in COMMANDS), "?")
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        cfg = load_config(args.config)
        for assignment in args.set:
            apply_override(cfg, assignment)
        base_dir = os.path.dirname(os.path.abspath(args.config)) if args.config else os.getcwd()
        out = output_dir(args, cfg)
        with np.errstate(over="ignore", invalid="ignore"):
            info = HANDLERS[args.command](args, cfg, base_dir, out)
    except JointXferError as exc:
        code = _exit_code(exc)
        print(_status({"status": "error", "command": command, "exit": code,
                       "kind": type(exc).__name__, "message": str(exc)}))
        return code
    except OSError as exc:
        print(_status({"status": "error", "command": command, "exit": 2,
                       "kind": type(exc).__name__, "message": str(exc)}))
        return 2
    print(_status({"status": "ok", "command": args.command, "exit": 0, "out": out,
                   **(info or {})}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
