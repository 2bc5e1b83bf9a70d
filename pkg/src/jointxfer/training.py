"""Stage orchestration and the SGD loops.

A pipeline is a list of :class:`StageSpec`. Single-dataset stages
(``pretrain`` / ``finetune``) minimize cross-entropy through one head; the
``joint`` stage draws one pair batch per iteration from two datasets and
minimizes ``l1*L1 + l2*L2 + l3*Lc`` where both heads see both mini-batches
and ``Lc`` is the contrastive loss over all ``K*K`` cross pairs.
"""

import csv
import dataclasses
import io
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import atomic_write, load_checkpoint, save_checkpoint
from .errors import (ArchMismatchError, CheckpointError, ConfigError, ContractError,
                     DivergenceError, JointXferError, PipelineError)
from .losses import contrastive_pairs, cross_entropy, joint_loss
from .network import (DESK_ARCH, ArchConfig, ModelParams, backward_features, build_model,
                      forward_features, group_of, is_conv_param)
from .datasets import MiniBatchSampler, PairSampler

log = logging.getLogger(__name__)

KINDS = ("pretrain", "finetune", "joint")
FREEZE_POLICIES = ("all_trainable", "fc_only")
LOG_COLUMNS = ("t", "L1", "L2", "Lc", "L_joint", "grad_norm_e", "grad_norm_c1", "grad_norm_c2")


@dataclass
class StageSpec:
    name: str
    kind: str
    datasets: list
    init: str = "fresh"
    freeze: str = "all_trainable"
    lr: float = 1e-4
    iterations: int = 2000
    batch_size: int = 2
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.01
    margin: float = 1.0
    seed: int = 0
    head: int = 1
    arch: ArchConfig = DESK_ARCH
    # constant lr unless lr_decay_every > 0: lr * lr_decay ** (t // lr_decay_every)
    lr_decay_every: int = 0
    lr_decay: float = 1.0

    def __post_init__(self):
        self.datasets = list(self.datasets)
        if isinstance(self.arch, dict):
            self.arch = ArchConfig.from_dict(self.arch)
        self.validate()

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind: must be one of {KINDS}, got {self.kind!r}")
        if self.freeze not in FREEZE_POLICIES:
            raise ConfigError(f"freeze: must be one of {FREEZE_POLICIES}, got {self.freeze!r}")
        want = 2 if self.kind == "joint" else 1
        if len(self.datasets) != want:
            raise ConfigError(f"datasets: {self.kind} stage needs {want}, got {len(self.datasets)}")
        if self.kind == "pretrain" and self.init != "fresh":
            raise ConfigError("init: pretrain stages start from a fresh model")
        if self.kind != "pretrain" and self.init == "fresh":
            raise ConfigError(f"init: {self.kind} stage needs a checkpoint")
        if not self.lr > 0:
            raise ConfigError("lr: must be positive")
        if self.iterations < 0:
            raise ConfigError("iterations: must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if self.head not in (1, 2):
            raise ConfigError("head: must be 1 or 2")

    def lr_at(self, t):
        if self.lr_decay_every > 0:
            return self.lr * self.lr_decay ** (t // self.lr_decay_every)
        return self.lr

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["arch"] = self.arch.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown stage fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    final_metrics: dict = field(default_factory=dict)

    def append(self, **rec):
        self.records.append(tuple(rec[c] for c in LOG_COLUMNS))

    def __len__(self):
        return len(self.records)

    def column(self, name):
        i = LOG_COLUMNS.index(name)
        return np.array([r[i] for r in self.records])

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.records:
            w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])
        return buf.getvalue()

    def write_csv(self, path):
        atomic_write(path, self.to_csv().encode("utf-8"))


@dataclass
class Checkpoint:
    params: ModelParams
    meta: dict
    log: TrainLog
    path: str = None


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def input_stats(*datasets):
    """Per-channel mean/std over the union of the datasets' inputs."""
    x = np.concatenate([d.x for d in datasets])
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    return mean, np.where(std > 1e-8, std, 1.0)


def frozen_names(params, freeze):
    if freeze == "fc_only":
        return {n for n in params.names() if is_conv_param(n)}
    return set()


def sgd_step(params, grads, lr, freeze="all_trainable"):
    """``theta -= lr * grad`` in place for every unfrozen tensor in ``grads``.

    Frozen tensors are never written. Returns ``params``.
    """
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    frozen = frozen_names(params, freeze)
    for name, g in grads.items():
        if name not in params.tensors or group_of(name) == "norm":
            raise ContractError(f"gradient for unknown or non-trainable tensor {name!r}")
        if g.shape != params.tensors[name].shape:
            raise ContractError(
                f"gradient shape {g.shape} != parameter shape "
                f"{params.tensors[name].shape} for {name!r}")
        if name in frozen:
            continue
        params.tensors[name] -= lr * g
    return params


def _group_norm(grads, group):
    sq = sum(float((g * g).sum()) for n, g in grads.items() if group_of(n) == group)
    return float(np.sqrt(sq))


def _rngs(seed):
    sampler_seq, dropout_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(sampler_seq), np.random.default_rng(dropout_seq)


def dataset_loss(params, ds, head=1, chunk=64):
    """Eval-mode mean cross-entropy of ``head`` over a whole dataset."""
    total = 0.0
    for s in range(0, len(ds), chunk):
        f = forward_features(ds.x[s:s + chunk], params, "eval")
        out = cross_entropy(f, ds.labels[s:s + chunk], params.head(head))
        total += out.value * len(f)
    return total / len(ds)


# ---------------------------------------------------------------------------
# gradient assembly
# ---------------------------------------------------------------------------

def classification_grads(params, x, labels, head=1, mode="train", rng=None,
                         skip_conv_grad=False):
    """Loss and gradients of mean cross-entropy through one head."""
    f, cache = forward_features(x, params, mode, rng, keep_cache=True,
                                skip_conv_grad=skip_conv_grad)
    out = cross_entropy(f, labels, params.head(head))
    grads = backward_features(out.d_feature, cache)
    grads[f"class{head}.w"], grads[f"class{head}.b"] = out.d_head
    return out.value, grads


def joint_grads(params, batch, lambdas=(1.0, 1.0, 0.01), mode="train", rng=None,
                skip_conv_grad=False, margin=None):
    """Loss terms and gradients of the joint objective on one pair batch.

    Both mini-batches share one forward pass (GN keeps samples independent).
    Head ``k`` receives gradient from both ``f_i`` and ``f_j``; each feature
    gradient is the sum of the two classification terms and the weighted
    matching term; the extractor gradient is their backpropagation.
    Returns ``(L1, L2, Lc, grads)``.
    """
    l1w, l2w, l3w = lambdas
    k = len(batch.labels_a)
    x = np.concatenate([batch.x_a, batch.x_b])
    f, cache = forward_features(x, params, mode, rng, keep_cache=True,
                                skip_conv_grad=skip_conv_grad)
    f_i, f_j = f[:k], f[k:]
    grads = {}
    df = np.zeros_like(f)
    losses = []
    for h, w in ((1, l1w), (2, l2w)):
        head = params.head(h)
        a = cross_entropy(f_i, batch.labels_a, head)
        b = cross_entropy(f_j, batch.labels_b, head)
        losses.append(a.value + b.value)
        grads[f"class{h}.w"] = w * (a.d_head[0] + b.d_head[0])
        grads[f"class{h}.b"] = w * (a.d_head[1] + b.d_head[1])
        df[:k] += w * a.d_feature
        df[k:] += w * b.d_feature
    match = params.match_head(margin)
    c = contrastive_pairs(f_i, f_j, batch.labels_a, batch.labels_b, match)
    df[:k] += l3w * c.d_feature[0]
    df[k:] += l3w * c.d_feature[1]
    if match.has_projection:
        grads["match.w"] = l3w * c.d_head[0]
        grads["match.b"] = l3w * c.d_head[1]
    grads.update(backward_features(df, cache))
    return losses[0], losses[1], c.value, grads


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def _check_finite(t, *values):
    if not all(np.isfinite(v) for v in values):
        raise DivergenceError(f"non-finite loss at iteration {t} (last good: {t - 1})",
                              last_good_iteration=t - 1)


def _init_params(stage, init_params):
    if stage.init == "fresh":
        return build_model(stage.arch, stage.seed)
    if init_params is None:
        raise ContractError(f"stage {stage.name!r} needs an initial checkpoint")
    return init_params.copy()


def _meta(stage, datasets, parent=None):
    return {
        "stage": stage.name,
        "kind": stage.kind,
        "datasets": [d.name for d in datasets],
        "stage_spec": {k: v for k, v in stage.to_dict().items() if k != "arch"},
        "parent": parent,
    }


def run_single(stage, dataset, init_params=None, parent=None):
    """Pretrain / fine-tune on one dataset through ``stage.head``."""
    params = _init_params(stage, init_params)
    params.tensors["norm.mean"][:], params.tensors["norm.std"][:] = input_stats(dataset)
    sampler_rng, drop_rng = _rngs(stage.seed)
    sampler = MiniBatchSampler(len(dataset), stage.batch_size, sampler_rng)
    skip_conv = stage.freeze == "fc_only"
    trainlog = TrainLog()
    for t in range(1, stage.iterations + 1):
        idx = sampler.next()
        loss, grads = classification_grads(params, dataset.x[idx], dataset.labels[idx],
                                           stage.head, "train", drop_rng, skip_conv)
        _check_finite(t, loss)
        trainlog.append(t=t, L1=loss, L2=0.0, Lc=0.0, L_joint=loss,
                        grad_norm_e=_group_norm(grads, "e"),
                        grad_norm_c1=_group_norm(grads, "class1"),
                        grad_norm_c2=_group_norm(grads, "class2"))
        sgd_step(params, grads, stage.lr_at(t - 1), stage.freeze)
    return Checkpoint(params, _meta(stage, [dataset], parent), trainlog)


def run_pretrain(stage, dataset):
    if stage.kind != "pretrain":
        raise ConfigError(f"run_pretrain got a {stage.kind} stage")
    return run_single(stage, dataset)


def run_finetune(stage, dataset, init_params, parent=None):
    if stage.kind != "finetune":
        raise ConfigError(f"run_finetune got a {stage.kind} stage")
    if init_params.arch != stage.arch:
        raise ArchMismatchError("init checkpoint arch differs from the stage arch")
    return run_single(stage, dataset, init_params, parent)


def run_joint(stage, ds_i, ds_j, init_params, parent=None):
    """Joint learning on two datasets, one ``K x K`` pair batch per iteration."""
    if stage.kind != "joint":
        raise ConfigError(f"run_joint got a {stage.kind} stage")
    params = _init_params(stage, init_params)
    params.tensors["norm.mean"][:], params.tensors["norm.std"][:] = input_stats(ds_i, ds_j)
    sampler_rng, drop_rng = _rngs(stage.seed)
    pairs = PairSampler(ds_i, ds_j, stage.batch_size, sampler_rng)
    lambdas = (stage.lambda1, stage.lambda2, stage.lambda3)
    skip_conv = stage.freeze == "fc_only"
    trainlog = TrainLog()
    for t in range(1, stage.iterations + 1):
        batch = pairs.next()
        l1, l2, lc, grads = joint_grads(params, batch, lambdas, "train", drop_rng, skip_conv,
                                        margin=stage.margin)
        lj = joint_loss(l1, l2, lc, *lambdas)
        _check_finite(t, l1, l2, lc, lj)
        trainlog.append(t=t, L1=l1, L2=l2, Lc=lc, L_joint=lj,
                        grad_norm_e=_group_norm(grads, "e"),
                        grad_norm_c1=_group_norm(grads, "class1"),
                        grad_norm_c2=_group_norm(grads, "class2"))
        sgd_step(params, grads, stage.lr_at(t - 1), stage.freeze)
    return Checkpoint(params, _meta(stage, [ds_i, ds_j], parent), trainlog)


def run_stage(stage, datasets, init_params=None, parent=None):
    """Dispatch one stage. ``datasets`` maps names to :class:`Dataset`."""
    try:
        ds = [datasets[n] for n in stage.datasets]
    except KeyError as exc:
        raise ConfigError(f"stage {stage.name!r}: unknown dataset {exc.args[0]!r}") from None
    if stage.kind == "pretrain":
        return run_pretrain(stage, ds[0])
    if stage.kind == "finetune":
        return run_finetune(stage, ds[0], init_params, parent)
    if init_params is not None and init_params.arch != stage.arch:
        raise ArchMismatchError("init checkpoint arch differs from the stage arch")
    return run_joint(stage, ds[0], ds[1], init_params, parent)


def _resolve_init(stage, done, out_dir):
    """``fresh``, ``stage:<name>`` for an earlier stage, or a checkpoint path."""
    if stage.init == "fresh":
        return None, None
    if stage.init.startswith("stage:"):
        ref = stage.init[len("stage:"):]
        if ref not in done:
            raise ConfigError(f"init references stage {ref!r} which has not run")
        ck = done[ref]
        return ck.params, ck.path or ref
    path = stage.init
    if out_dir and not os.path.isabs(path) and not os.path.exists(path):
        path = os.path.join(out_dir, path)
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint {stage.init} not found")
    params, _ = load_checkpoint(path, expected_arch=stage.arch)
    return params, path


def run_pipeline(stages, datasets, out_dir=None):
    """Run stages in order, threading checkpoints between them.

    With ``out_dir`` each stage writes ``NN_<name>.ckpt`` and
    ``NN_<name>.log.csv``. Any failure raises :class:`PipelineError` carrying
    the 1-based stage index.
    """
    done = {}
    results = []
    for i, stage in enumerate(stages, 1):
        try:
            init, parent = _resolve_init(stage, done, out_dir)
            log.info("stage %d/%d %s (%s) on %s", i, len(stages), stage.name, stage.kind,
                     ",".join(stage.datasets))
            ck = run_stage(stage, datasets, init, parent)
            if out_dir:
                stem = os.path.join(out_dir, f"{i:02d}_{stage.name}")
                ck.path = stem + ".ckpt"
                save_checkpoint(ck.params, ck.meta, ck.path)
                ck.log.write_csv(stem + ".log.csv")
        except JointXferError as exc:
            raise PipelineError(str(exc), i) from exc
        done[stage.name] = ck
        results.append(ck)
    return results
