"""Scenario runners reproducing the qualitative normalization phenomena at
desk scale on synthetic data.

Every runner is deterministic under a fixed seed and returns a ScenarioRun
holding the metric rows (run_id, scenario, step, split, stats_mode, metric,
value), a summary dict, and checkpoint payloads.
"""

import copy
from dataclasses import dataclass, field

import numpy as np

from .batching import PER_DOMAIN, SHARED, DomainPolicy, NormBatchPlan
from .errors import InvalidPolicy
from .layer import BnLayer, BnMode
from .net import (
    Affine,
    Linear,
    MeanPool,
    Network,
    Relu,
    SgdConfig,
    classification_error,
    softmax_cross_entropy,
    train,
)
from .precise import precise_bn, set_population_stats
from .synthetic import (
    Corruption,
    GaussianClasses,
    GroupedBatchSampler,
    MixingCorruption,
    MultiScaleDomains,
    SpatialGaussianClasses,
    make_clustered_data,
)
from .tensor import ChannelStats, channel_moments, normalize

__all__ = ["ScenarioRun", "SCENARIOS", "run_scenario"]


@dataclass
class ScenarioRun:
    scenario: str
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    stats_checkpoint: dict = field(default_factory=dict)
    params_checkpoint: dict = field(default_factory=dict)

    def log(self, run_id, step, split, stats_mode, metric, value):
        self.rows.append(
            (run_id, self.scenario, int(step), split, stats_mode, metric, float(value))
        )


def build_net(rng, dims, eps=1e-5, ema_momentum=0.9, pool=False):
    """Linear -> BN -> Affine -> Relu blocks with a final Linear classifier;
    ``pool`` inserts a global spatial average before the classifier (for
    inputs with spatial extent)."""
    layers = []
    for i in range(len(dims) - 2):
        layers.append(Linear.init(rng, dims[i], dims[i + 1]))
        bn = BnLayer(dims[i + 1], eps=eps, momentum=ema_momentum)
        layers.append(bn)
        layers.append(Affine.identity(dims[i + 1]))
        layers.append(Relu())
    if pool:
        layers.append(MeanPool())
    layers.append(Linear.init(rng, dims[-2], dims[-1]))
    return Network(layers)


def checkpoints_from(net):
    names = net.layer_names()
    stats = {}
    params = {}
    for name, layer in zip(names, net.layers):
        if isinstance(layer, BnLayer):
            if layer.frozen is not None:
                src, s = "frozen", layer.frozen
            elif layer.pop is not None:
                src, s = "precise", layer.pop
            else:
                src, s = "ema", layer.ema.as_channel_stats()
            stats[name] = {
                "mean": list(s.mean),
                "var": list(s.var),
                "count": int(s.count),
                "source": src,
            }
        elif isinstance(layer, (Linear, Affine)):
            params[name] = {
                k: np.asarray(getattr(layer, k)).reshape(-1).tolist()
                for k in layer.param_names
            }
    return stats, params


def _seed(base, k):
    # independent deterministic streams per sub-run
    return int(np.random.SeedSequence([base, k]).generate_state(1)[0])


def _pop_stats(net, x_pop, batch=32):
    return precise_bn(net, x_pop, batch, aggregator="moment_matching")


def _shuffled(rng, x, y):
    order = rng.permutation(x.shape[0])
    return x[order], y[order]


# ---------------------------------------------------------------------------
# EMA vs precise statistics
# ---------------------------------------------------------------------------

EMA_VS_PRECISE_DEFAULTS = {
    "classes": 16,
    "dim": 32,
    "separation": 3.0,
    "noise": 1.0,
    "train_size": 4096,
    "val_size": 1024,
    "hidden": [64, 64],
    "ema_momentum": 0.999,
    "lr": 0.05,
    "sgd_momentum": 0.9,
    "steps": 300,
    "batch_size": 32,
    "eval_every": 50,
    "precise_n": 1024,
    "precise_b_sweep": [2, 8, 32, 1024],
    "subset_sizes": [32, 256, 2048],
}


def run_ema_vs_precise(cfg, seed):
    run = ScenarioRun("ema_vs_precise")
    task = GaussianClasses(cfg["classes"], cfg["dim"], cfg["separation"],
                           cfg["noise"], seed=_seed(seed, 1))
    data_rng = np.random.default_rng(_seed(seed, 2))
    x_train, y_train = task.sample(data_rng, cfg["train_size"])
    x_val, y_val = task.sample(data_rng, cfg["val_size"])
    net = build_net(np.random.default_rng(_seed(seed, 3)),
                    [cfg["dim"], *cfg["hidden"], cfg["classes"]],
                    ema_momentum=cfg["ema_momentum"])
    sgd = SgdConfig(lr=cfg["lr"], steps=cfg["steps"], batch_size=cfg["batch_size"],
                    momentum=cfg["sgd_momentum"], seed=_seed(seed, 4))
    run_id = f"ema_vs_precise-s{seed}"
    n_pop = cfg["precise_n"]

    def sample_batch(rng, size):
        idx = rng.integers(0, x_train.shape[0], size=size)
        return x_train[idx], y_train[idx]

    def evaluate(step, net):
        if (step + 1) % cfg["eval_every"] and step + 1 != cfg["steps"]:
            return
        err_ema = classification_error(net, x_val, y_val,
                                       mode=BnMode.EVAL_POPULATION)
        stats = _pop_stats(net, x_train[:n_pop])
        err_precise = classification_error(net, x_val, y_val,
                                           mode=BnMode.EVAL_POPULATION,
                                           pop_override=stats)
        run.log(run_id, step + 1, "val", "ema", "error", err_ema)
        run.log(run_id, step + 1, "val", "precise", "error", err_precise)

    train(net, sample_batch, sgd, plan=None, callback=evaluate)

    # batch-size sweep of the precise pass (small B accumulates errors)
    for b in cfg["precise_b_sweep"]:
        b_eff = min(b, n_pop)
        stats = _pop_stats(net, x_train[:n_pop], batch=b_eff)
        err = classification_error(net, x_val, y_val,
                                   mode=BnMode.EVAL_POPULATION,
                                   pop_override=stats)
        run.log(run_id, cfg["steps"], "val", f"precise_b{b_eff}", "error", err)
        run.summary.setdefault("precise_b_sweep", {})[str(b_eff)] = err

    # estimation variance between disjoint subsets shrinks with N
    for n_sub in cfg["subset_sizes"]:
        s1 = _pop_stats(net, x_train[:n_sub])
        s2 = _pop_stats(net, x_train[n_sub : 2 * n_sub])
        e1 = classification_error(net, x_val, y_val,
                                  mode=BnMode.EVAL_POPULATION, pop_override=s1)
        e2 = classification_error(net, x_val, y_val,
                                  mode=BnMode.EVAL_POPULATION, pop_override=s2)
        gap = abs(e1 - e2)
        # relative distance between the two estimates themselves
        dists = []
        for i in s1:
            a, b = s1[i], s2[i]
            dists.append(np.mean(np.abs(a.var - b.var) / (a.var + b.var)))
            dists.append(np.mean(np.abs(a.mean - b.mean)
                                 / np.sqrt((a.var + b.var) / 2)))
        stats_gap = float(np.mean(dists))
        run.log(run_id, cfg["steps"], "val", f"precise_n{n_sub}",
                "subset_error_gap", gap)
        run.log(run_id, cfg["steps"], "val", f"precise_n{n_sub}",
                "subset_stats_gap", stats_gap)
        run.summary.setdefault("subset_error_gap", {})[str(n_sub)] = gap
        run.summary.setdefault("subset_stats_gap", {})[str(n_sub)] = stats_gap

    curves = {"ema": [], "precise": []}
    for row in run.rows:
        if row[5] == "error" and row[4] in curves:
            curves[row[4]].append(row[6])
    run.summary["ema_curve"] = curves["ema"]
    run.summary["precise_curve"] = curves["precise"]
    set_population_stats(net, _pop_stats(net, x_train[:n_pop]))
    run.stats_checkpoint, run.params_checkpoint = checkpoints_from(net)
    return run


# ---------------------------------------------------------------------------
# Normalization-batch-size sweep
# ---------------------------------------------------------------------------

NBS_SWEEP_DEFAULTS = {
    "classes": 16,
    "channels": 32,
    "sites": 4,
    "separation": 8.0,
    "noise": 0.5,
    "gain": 1.2,
    "offset": 3.0,
    "train_size": 4096,
    "val_size": 1024,
    "hidden": [64, 64],
    "lr": 0.05,
    "sgd_momentum": 0.9,
    "steps": 800,
    "batch_size": 32,
    "nbs_list": [2, 8, 32],
    "precise_n": 1024,
    "train_eval_size": 1024,
}


def _spatial_task(cfg, seed):
    return SpatialGaussianClasses(
        cfg["classes"], cfg["channels"], cfg["sites"], cfg["separation"],
        cfg["noise"], cfg["gain"], cfg["offset"], seed=_seed(seed, 1)
    )


def run_nbs_sweep(cfg, seed):
    run = ScenarioRun("nbs_sweep")
    task = _spatial_task(cfg, seed)
    data_rng = np.random.default_rng(_seed(seed, 2))
    x_train, y_train = task.sample(data_rng, cfg["train_size"])
    x_val, y_val = task.sample(data_rng, cfg["val_size"])

    def sample_batch(rng, size):
        idx = rng.integers(0, x_train.shape[0], size=size)
        return x_train[idx], y_train[idx]

    for nbs in cfg["nbs_list"]:
        run_id = f"nbs_sweep-nbs{nbs}-s{seed}"
        net = build_net(np.random.default_rng(_seed(seed, 3)),
                        [cfg["channels"], *cfg["hidden"], cfg["classes"]],
                        pool=True)
        plan = NormBatchPlan(strategy="ghost", sub_batch=nbs)
        sgd = SgdConfig(lr=cfg["lr"], steps=cfg["steps"],
                        batch_size=cfg["batch_size"],
                        momentum=cfg["sgd_momentum"], seed=_seed(seed, 4))
        train(net, sample_batch, sgd, plan=plan)

        eval_rng = np.random.default_rng(_seed(seed, 5))
        n_tr = cfg["train_eval_size"]
        xt, yt = _shuffled(eval_rng, x_train[:n_tr], y_train[:n_tr])
        sizes = [nbs] * (n_tr // nbs)
        err_train = classification_error(net, xt, yt, mode=BnMode.EVAL_MINIBATCH,
                                         cohort_sizes=sizes)
        xv, yv = _shuffled(eval_rng, x_val, y_val)
        sizes_v = [nbs] * (x_val.shape[0] // nbs)
        err_val_mb = classification_error(net, xv, yv, mode=BnMode.EVAL_MINIBATCH,
                                          cohort_sizes=sizes_v)
        # population statistics estimated at the training cohort size, as an
        # EMA would be forced to; small cohorts distort deeper-layer stats
        stats = _pop_stats(net, x_train[: cfg["precise_n"]], batch=nbs)
        err_val_pop = classification_error(net, x_val, y_val,
                                           mode=BnMode.EVAL_POPULATION,
                                           pop_override=stats)
        run.log(run_id, cfg["steps"], "train", "minibatch", "error", err_train)
        run.log(run_id, cfg["steps"], "val", "minibatch", "error", err_val_mb)
        run.log(run_id, cfg["steps"], "val", "population", "error", err_val_pop)
        run.summary[str(nbs)] = {
            "train_minibatch": err_train,
            "val_minibatch": err_val_mb,
            "val_population": err_val_pop,
        }
        set_population_stats(net, stats)
        run.stats_checkpoint, run.params_checkpoint = checkpoints_from(net)
    return run


# ---------------------------------------------------------------------------
# FrozenBN fine-tuning
# ---------------------------------------------------------------------------

FROZEN_FINETUNE_DEFAULTS = {
    "classes": 16,
    "channels": 32,
    "sites": 4,
    "separation": 8.0,
    "noise": 0.5,
    "gain": 1.2,
    "offset": 3.0,
    "train_size": 4096,
    "val_size": 1024,
    "hidden": [64, 64],
    "lr": 0.05,
    "sgd_momentum": 0.9,
    "steps": 800,
    "batch_size": 32,
    "nbs": 2,
    "freeze_fraction": 0.8,
    "warmup_steps": 40,
    "precise_n": 1024,
}


def run_frozen_finetune(cfg, seed):
    run = ScenarioRun("frozen_finetune")
    task = _spatial_task(cfg, seed)
    data_rng = np.random.default_rng(_seed(seed, 2))
    x_train, y_train = task.sample(data_rng, cfg["train_size"])
    x_val, y_val = task.sample(data_rng, cfg["val_size"])

    def sample_batch(rng, size):
        idx = rng.integers(0, x_train.shape[0], size=size)
        return x_train[idx], y_train[idx]

    plan = NormBatchPlan(strategy="ghost", sub_batch=cfg["nbs"])
    split_step = int(cfg["steps"] * cfg["freeze_fraction"])
    rest = cfg["steps"] - split_step
    net = build_net(np.random.default_rng(_seed(seed, 3)),
                    [cfg["channels"], *cfg["hidden"], cfg["classes"]],
                    pool=True)
    sgd1 = SgdConfig(lr=cfg["lr"], steps=split_step, batch_size=cfg["batch_size"],
                     momentum=cfg["sgd_momentum"], seed=_seed(seed, 4))
    train(net, sample_batch, sgd1, plan=plan)

    control = copy.deepcopy(net)
    sgd2 = SgdConfig(lr=cfg["lr"], steps=rest, batch_size=cfg["batch_size"],
                     momentum=cfg["sgd_momentum"], seed=_seed(seed, 5))
    train(control, sample_batch, sgd2, plan=plan)
    # both arms estimate statistics at the training cohort size; the frozen
    # arm wins by adapting its weights to the frozen stats, not by getting a
    # better estimate
    stats_c = _pop_stats(control, x_train[: cfg["precise_n"]], batch=cfg["nbs"])
    err_control = classification_error(control, x_val, y_val,
                                       mode=BnMode.EVAL_POPULATION,
                                       pop_override=stats_c)

    snap = _pop_stats(net, x_train[: cfg["precise_n"]], batch=cfg["nbs"])
    for i in net.bn_indices:
        net.layers[i].freeze(snap[i])
    sgd3 = SgdConfig(lr=cfg["lr"], steps=rest, batch_size=cfg["batch_size"],
                     momentum=cfg["sgd_momentum"],
                     warmup_steps=cfg["warmup_steps"], seed=_seed(seed, 5))
    # FROZEN is each layer's own mode now; the plan is irrelevant to stats
    train(net, sample_batch, sgd3, plan=plan)
    err_frozen = classification_error(net, x_val, y_val, mode=BnMode.FROZEN)

    run_id = f"frozen_finetune-s{seed}"
    run.log(run_id, cfg["steps"], "val", "frozen_finetune", "error", err_frozen)
    run.log(run_id, cfg["steps"], "val", "population", "error", err_control)
    run.summary = {"frozen_finetune": err_frozen, "unfrozen_population": err_control}
    run.stats_checkpoint, run.params_checkpoint = checkpoints_from(net)
    return run


# ---------------------------------------------------------------------------
# Domain adaptation of population statistics
# ---------------------------------------------------------------------------

DOMAIN_ADAPT_DEFAULTS = {
    "classes": 16,
    "dim": 32,
    "separation": 3.0,
    "noise": 1.0,
    "train_size": 4096,
    "val_size": 1024,
    "adapt_size": 1024,
    "hidden": [64, 64],
    "lr": 0.05,
    "sgd_momentum": 0.9,
    "steps": 400,
    "batch_size": 32,
    "precise_n": 1024,
    "corruptions": {
        "none": {"scale": 1.0, "shift": 0.0, "noise": 0.0},
        "strong": {"scale": 0.2, "shift": 3.0, "noise": 0.5},
    },
}


def run_domain_adapt(cfg, seed):
    run = ScenarioRun("domain_adapt")
    task = GaussianClasses(cfg["classes"], cfg["dim"], cfg["separation"],
                           cfg["noise"], seed=_seed(seed, 1))
    data_rng = np.random.default_rng(_seed(seed, 2))
    x_train, y_train = task.sample(data_rng, cfg["train_size"])
    x_val, y_val = task.sample(data_rng, cfg["val_size"])
    x_adapt, _ = task.sample(data_rng, cfg["adapt_size"])

    def sample_batch(rng, size):
        idx = rng.integers(0, x_train.shape[0], size=size)
        return x_train[idx], y_train[idx]

    net = build_net(np.random.default_rng(_seed(seed, 3)),
                    [cfg["dim"], *cfg["hidden"], cfg["classes"]])
    sgd = SgdConfig(lr=cfg["lr"], steps=cfg["steps"], batch_size=cfg["batch_size"],
                    momentum=cfg["sgd_momentum"], seed=_seed(seed, 4))
    train(net, sample_batch, sgd)
    source_stats = _pop_stats(net, x_train[: cfg["precise_n"]])

    run_id = f"domain_adapt-s{seed}"
    corrupt_rng = np.random.default_rng(_seed(seed, 5))
    for name, spec in cfg["corruptions"].items():
        corr = Corruption(spec["scale"], spec["shift"], spec["noise"])
        xt_val = corr.apply(x_val, corrupt_rng)
        xt_adapt = corr.apply(x_adapt, corrupt_rng)
        err_source = classification_error(net, xt_val, y_val,
                                          mode=BnMode.EVAL_POPULATION,
                                          pop_override=source_stats)
        target_stats = _pop_stats(net, xt_adapt)
        err_target = classification_error(net, xt_val, y_val,
                                          mode=BnMode.EVAL_POPULATION,
                                          pop_override=target_stats)
        run.log(run_id, cfg["steps"], f"val_{name}", "source_stats", "error",
                err_source)
        run.log(run_id, cfg["steps"], f"val_{name}", "target_stats", "error",
                err_target)
        run.summary[name] = {"source_stats": err_source,
                             "target_stats": err_target}
    set_population_stats(net, source_stats)
    run.stats_checkpoint, run.params_checkpoint = checkpoints_from(net)
    return run


# ---------------------------------------------------------------------------
# Shared head across multi-scale domains
# ---------------------------------------------------------------------------

SHARED_HEAD_DEFAULTS = {
    "classes": 16,
    "dim": 32,
    "separation": 6.0,
    "noise": 0.8,
    "hidden": 128,
    "domains": [
        {"scale": 1.0, "shift": 0.0, "noise": 0.0, "mix": False},
        {"scale": 2.0, "shift": 1.0, "noise": 0.0, "mix": True},
        {"scale": 0.5, "shift": -1.0, "noise": 0.0, "mix": True},
    ],
    "lr": 0.05,
    "sgd_momentum": 0.9,
    "steps": 1200,
    "domain_batch": 16,
    "val_per_domain": 512,
    "pop_batches": 32,
    "eps": 1e-5,
    "policies": [
        ["shared", "shared", "shared"],
        ["shared", "per_domain", "shared"],
        ["per_domain", "shared", "shared"],
        ["per_domain", "per_domain", "shared"],
        ["per_domain", "shared", "per_domain"],
        ["per_domain", "per_domain", "per_domain"],
    ],
}

CONSISTENT_ROWS = (0, 3, 5)
INCONSISTENT_ROW = 1


class SharedHeadNet:
    """One hidden head applied to every domain, with policy-controlled
    normalization: shared statistics pool all domains' features, per-domain
    statistics normalize each domain on its own."""

    def __init__(self, rng, dim, hidden, classes, n_domains, policy, eps=1e-5):
        self.policy = policy
        self.eps = eps
        self.n_domains = n_domains
        self.l1 = Linear.init(rng, dim, hidden)
        self.l2 = Linear.init(rng, hidden, classes)
        n_aff = n_domains if policy.affine == PER_DOMAIN else 1
        self.affines = [Affine.identity(hidden) for _ in range(n_aff)]
        self.relu = Relu()
        self.scratch_bn = BnLayer(hidden, eps=eps)
        self.pop_stats = None  # ChannelStats or list per domain

    def _affine_for(self, d):
        return self.affines[d if self.policy.affine == PER_DOMAIN else 0]

    def _forward_from_stats(self, hs, stats_per_domain):
        outs, caches = [], []
        for d, (h, stats) in enumerate(zip(hs, stats_per_domain)):
            inv = 1.0 / np.sqrt(stats.var + self.eps)
            xhat = normalize(h, stats, self.eps)
            a, ca = self._affine_for(d).forward(xhat)
            r, cr = self.relu.forward(a)
            logits, cl = self.l2.forward(r)
            outs.append(logits[:, :, 0, 0])
            caches.append({"xhat": xhat, "inv": inv, "affine": ca, "relu": cr,
                           "l2": cl})
        return outs, caches

    def forward_train(self, xs):
        hs, l1_caches = [], []
        for x in xs:
            h, c = self.l1.forward(x)
            hs.append(h)
            l1_caches.append(c)
        if self.policy.sgd_stats == SHARED:
            concat = np.concatenate(hs, axis=0)
            stats = channel_moments(concat)
            stats_per_domain = [stats] * len(xs)
        else:
            stats_per_domain = [channel_moments(h) for h in hs]
        outs, caches = self._forward_from_stats(hs, stats_per_domain)
        return outs, {"l1": l1_caches, "per_domain": caches,
                      "sizes": [x.shape[0] for x in xs],
                      "shared_stats": self.policy.sgd_stats == SHARED}

    def backward_train(self, caches, dlogits_list):
        grads = {"l1": {k: np.zeros_like(getattr(self.l1, k))
                        for k in self.l1.param_names},
                 "l2": {k: np.zeros_like(getattr(self.l2, k))
                        for k in self.l2.param_names},
                 "affines": [
                     {k: np.zeros_like(getattr(a, k)) for k in a.param_names}
                     for a in self.affines
                 ]}
        dxhat_list = []
        for d, (cache, dlog) in enumerate(zip(caches["per_domain"], dlogits_list)):
            dr, gl2 = self.l2.backward(cache["l2"], dlog[:, :, None, None])
            for k, v in gl2.items():
                grads["l2"][k] += v
            da = self.relu.backward(cache["relu"], dr)[0]
            dxhat, gaff = self._affine_for(d).backward(cache["affine"], da)
            a_idx = d if self.policy.affine == PER_DOMAIN else 0
            for k, v in gaff.items():
                grads["affines"][a_idx][k] += v
            dxhat_list.append(dxhat)

        if caches["shared_stats"]:
            dxhat = np.concatenate(dxhat_list, axis=0)
            xhat = np.concatenate([c["xhat"] for c in caches["per_domain"]], axis=0)
            inv = caches["per_domain"][0]["inv"]
            dh = _bn_backward(xhat, inv, dxhat)
            dhs = np.split(dh, np.cumsum(caches["sizes"])[:-1], axis=0)
        else:
            dhs = [
                _bn_backward(c["xhat"], c["inv"], dx)
                for c, dx in zip(caches["per_domain"], dxhat_list)
            ]
        for c1, dh in zip(caches["l1"], dhs):
            _, gl1 = self.l1.backward(c1, dh)
            for k, v in gl1.items():
                grads["l1"][k] += v
        return grads

    def train_population_stats(self, xs_by_domain):
        hs = [self.l1.forward(x)[0] for x in xs_by_domain]
        if self.policy.pop_stats == SHARED:
            self.pop_stats = channel_moments(np.concatenate(hs, axis=0))
        else:
            self.pop_stats = [channel_moments(h) for h in hs]

    def eval_error(self, xs, ys):
        if self.pop_stats is None:
            raise InvalidPolicy("population statistics were never trained")
        wrong = 0
        total = 0
        for d, (x, y) in enumerate(zip(xs, ys)):
            h, _ = self.l1.forward(x)
            stats = (self.pop_stats if isinstance(self.pop_stats, ChannelStats)
                     else self.pop_stats[d])
            xhat = normalize(h, stats, self.eps)
            a, _ = self._affine_for(d).forward(xhat)
            r, _ = self.relu.forward(a)
            logits, _ = self.l2.forward(r)
            wrong += int((logits[:, :, 0, 0].argmax(axis=1) != y).sum())
            total += len(y)
        return wrong / total


def _bn_backward(xhat, inv, dy):
    m = dy.shape[0] * dy.shape[2] * dy.shape[3]
    sum_dy = dy.sum(axis=(0, 2, 3), keepdims=True)
    sum_dy_xhat = (dy * xhat).sum(axis=(0, 2, 3), keepdims=True)
    return (inv[None, :, None, None] / m) * (m * dy - sum_dy - xhat * sum_dy_xhat)


def run_shared_head(cfg, seed):
    run = ScenarioRun("shared_head")
    base = GaussianClasses(cfg["classes"], cfg["dim"], cfg["separation"],
                           cfg["noise"], seed=_seed(seed, 1))
    transforms = []
    for d, spec in enumerate(cfg["domains"]):
        if spec.get("mix"):
            transforms.append(MixingCorruption.random_rotation(
                cfg["dim"], np.random.default_rng(_seed(seed, 20 + d)),
                scale=spec["scale"], shift=spec["shift"], noise=spec["noise"],
            ))
        else:
            transforms.append(
                Corruption(spec["scale"], spec["shift"], spec["noise"])
            )
    domains = MultiScaleDomains(base, transforms)
    d_count = domains.n_domains
    data_rng = np.random.default_rng(_seed(seed, 2))
    val_xs, val_ys = [], []
    pop_xs = []
    for d in range(d_count):
        x, y = domains.sample_domain(data_rng, d, cfg["val_per_domain"])
        val_xs.append(x)
        val_ys.append(y)
        pop_xs.append(domains.sample_domain(data_rng, d, cfg["val_per_domain"])[0])

    for row, (sgd_s, pop_s, aff_s) in enumerate(cfg["policies"]):
        policy = DomainPolicy(sgd_stats=sgd_s, pop_stats=pop_s, affine=aff_s)
        net = SharedHeadNet(np.random.default_rng(_seed(seed, 3)),
                            cfg["dim"], cfg["hidden"], cfg["classes"],
                            d_count, policy, eps=cfg["eps"])
        rng = np.random.default_rng(_seed(seed, 10 + row))
        momentum = cfg["sgd_momentum"]
        velocity = {}
        nb = cfg["domain_batch"]
        for _ in range(cfg["steps"]):
            xs, ys = [], []
            for d in range(d_count):
                x, y = domains.sample_domain(rng, d, nb)
                xs.append(x)
                ys.append(y)
            outs, caches = net.forward_train(xs)
            total = sum(len(y) for y in ys)
            dlogits = []
            for logits, y in zip(outs, ys):
                _, dl = softmax_cross_entropy(logits, y)
                dlogits.append(dl * len(y) / total)
            grads = net.backward_train(caches, dlogits)
            for obj, g in [(net.l1, grads["l1"]), (net.l2, grads["l2"])] + [
                (a, ga) for a, ga in zip(net.affines, grads["affines"])
            ]:
                for k, gv in g.items():
                    key = (id(obj), k)
                    v = velocity.get(key)
                    v = gv if v is None else momentum * v + gv
                    velocity[key] = v
                    setattr(obj, k, getattr(obj, k) - cfg["lr"] * v)
        net.train_population_stats(pop_xs)
        err = net.eval_error(val_xs, val_ys)
        run_id = f"shared_head-row{row + 1}-s{seed}"
        run.log(run_id, cfg["steps"], "val", "population", "error", err)
        run.summary[f"row{row + 1}"] = {
            "policy": [sgd_s, pop_s, aff_s],
            "error": err,
        }
    return run


# ---------------------------------------------------------------------------
# Information leakage with crafted batches
# ---------------------------------------------------------------------------

LEAKAGE_DEFAULTS = {
    "classes": 16,
    "dim": 32,
    "separation": 4.0,
    "noise": 0.8,
    "latent_scale": 4.0,
    "groups_per_batch": 16,
    "copies_per_group": 2,
    "train_clusters": 2048,
    "val_clusters": 1024,
    "hidden": [128, 128],
    "lr": 0.1,
    "sgd_momentum": 0.9,
    "steps": 600,
    "eval_window": 50,
    "precise_n": 1024,
}


def _leakage_net(cfg, seed):
    rng = np.random.default_rng(_seed(seed, 3))
    dims = [cfg["dim"], cfg["hidden"][0]]
    layers = [
        Linear.init(rng, dims[0], dims[1]),
        BnLayer(dims[1]),
        Affine.identity(dims[1]),
        Relu(),
        Linear.init(rng, cfg["hidden"][0], cfg["hidden"][1]),
        Relu(),
        Linear.init(rng, cfg["hidden"][1], cfg["classes"]),
    ]
    return Network(layers)


def run_leakage(cfg, seed):
    run = ScenarioRun("leakage")
    g, m = cfg["groups_per_batch"], cfg["copies_per_group"]
    sampler = GroupedBatchSampler(g, m)
    batch = sampler.batch_size
    task = GaussianClasses(cfg["classes"], cfg["dim"], cfg["separation"],
                           cfg["noise"], seed=_seed(seed, 1))
    data_rng = np.random.default_rng(_seed(seed, 2))
    data = make_clustered_data(task, data_rng, cfg["train_clusters"], m,
                               cfg["latent_scale"])
    val = make_clustered_data(task, data_rng, cfg["val_clusters"], m,
                              cfg["latent_scale"])
    # control stream: identical marginals, no cluster pattern (m = 1)
    control = make_clustered_data(task, data_rng, cfg["train_clusters"] * m, 1,
                                  cfg["latent_scale"])

    def crafted_batch(order=None):
        def fn(rng, size):
            idx = sampler.draw(data, rng)
            if order is not None:
                idx = idx[order]
            return data.x[idx], data.labels[idx]
        return fn

    def control_batch(rng, size):
        idx = rng.integers(0, control.x.shape[0], size=size)
        return control.x[idx], control.labels[idx]

    variants = {
        "crafted": (crafted_batch(),
                    NormBatchPlan(strategy="ghost", sub_batch=m)),
        "ghost_fix": (crafted_batch(sampler.one_per_group_order()),
                      NormBatchPlan(strategy="ghost", sub_batch=g)),
        "shuffle_fix": (crafted_batch(),
                        NormBatchPlan(strategy="shuffle",
                                      worker_sizes=[batch // 2, batch // 2])),
        "sync_fix": (crafted_batch(), NormBatchPlan(strategy="sync")),
        "control": (control_batch, NormBatchPlan(strategy="sync")),
    }

    x_val, y_val = val.x, val.labels
    pattern_sizes = [m] * (x_val.shape[0] // m)
    window = cfg["eval_window"]
    for name, (batch_fn, plan) in variants.items():
        net = _leakage_net(cfg, seed)
        sgd = SgdConfig(lr=cfg["lr"], steps=cfg["steps"], batch_size=batch,
                        momentum=cfg["sgd_momentum"], seed=_seed(seed, 4))
        source = data if name != "control" else control
        run_id = f"leakage-{name}-s{seed}"
        # final population error averaged over a few late snapshots to damp
        # plateau fluctuation of individual checkpoints
        snaps = []

        def snapshot(step, net):
            remaining = cfg["steps"] - 1 - step
            if remaining % window or remaining // window >= 3:
                return
            s = _pop_stats(net, source.x[: cfg["precise_n"]])
            e = classification_error(net, x_val, y_val,
                                     mode=BnMode.EVAL_POPULATION,
                                     pop_override=s)
            snaps.append((step + 1, e, s))

        train(net, batch_fn, sgd, plan=plan, callback=snapshot)
        for step, e, _ in snaps:
            run.log(run_id, step, "val", "population", "error", e)
        err_pop = float(np.mean([e for _, e, _ in snaps]))
        stats = snaps[-1][2]
        entry = {"population": err_pop}
        if name == "crafted":
            err_pat = classification_error(net, x_val, y_val,
                                           mode=BnMode.EVAL_MINIBATCH,
                                           cohort_sizes=pattern_sizes)
            rng_e = np.random.default_rng(_seed(seed, 6))
            xs, ys = _shuffled(rng_e, x_val, y_val)
            err_rand = classification_error(net, xs, ys,
                                            mode=BnMode.EVAL_MINIBATCH,
                                            cohort_sizes=pattern_sizes)
            run.log(run_id, cfg["steps"], "val", "minibatch_pattern", "error",
                    err_pat)
            run.log(run_id, cfg["steps"], "val", "minibatch_random", "error",
                    err_rand)
            entry["minibatch_pattern"] = err_pat
            entry["minibatch_random"] = err_rand
            set_population_stats(net, stats)
            run.stats_checkpoint, run.params_checkpoint = checkpoints_from(net)
        run.summary[name] = entry
    return run


# ---------------------------------------------------------------------------

SCENARIOS = {
    "ema_vs_precise": (run_ema_vs_precise, EMA_VS_PRECISE_DEFAULTS),
    "nbs_sweep": (run_nbs_sweep, NBS_SWEEP_DEFAULTS),
    "frozen_finetune": (run_frozen_finetune, FROZEN_FINETUNE_DEFAULTS),
    "domain_adapt": (run_domain_adapt, DOMAIN_ADAPT_DEFAULTS),
    "shared_head": (run_shared_head, SHARED_HEAD_DEFAULTS),
    "leakage": (run_leakage, LEAKAGE_DEFAULTS),
}


def run_scenario(name, cfg, seed):
    fn, _ = SCENARIOS[name]
    return fn(cfg, seed)
