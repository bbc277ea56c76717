"""End-to-end experiment pipeline: data, training, propagation, detectors,
evaluation and CSV emission."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields

import numpy as np

from .adversary import AttackConfig, pgd_attack
from .datagen import (LabeledDataset, make_domain_specs, partition_users,
                      sample_domain, split_train_val)
from .detector import build_detector_dataset, fit_detector, robust_predict
from .errors import ArgumentError
from .federation import (FederationConfig, UserState, aggregate, model_flops,
                         restore_best_models, run_federated_training,
                         save_checkpoint)
from .nn import build_mlp, clone_model, forward, predict
from .propagation import (PropagationConfig, StatBundle, pairwise_distances,
                          propagate)


@dataclass
class DataConfig:
    domains: int = 3
    users_per_domain: int = 4
    dim: int = 32
    classes: int = 10
    train_per_user: int = 500
    val_per_user: int = 100
    test_per_user: int = 200
    scheme: str = "uniform"          # uniform | dirichlet
    dirichlet_beta: float = 1.0
    noise_scale: float = 0.35
    feature_scale: float = 0.10


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    hidden: list = field(default_factory=lambda: [64, 64])
    federation: FederationConfig = field(default_factory=FederationConfig)
    propagation: PropagationConfig = field(default_factory=PropagationConfig)
    at_ratio: float = 0.25           # per-domain AT fraction, lowest indices
    at_domains: list = None          # alternative: whole domains are AT
    seed: int = 0
    out_dir: str = "runs/exp"
    workers: int = 1
    history_eval_cap: int = 64
    select_best: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        kwargs = {}
        if "data" in d:
            kwargs["data"] = DataConfig(**d.pop("data"))
        fed = d.pop("federation", {})
        atk = d.pop("attack", None)
        flags = d.pop("flags", None)
        if atk is not None:
            fed["attack"] = AttackConfig(**atk)
        if flags is not None:
            fed.update({f"use_{k}": bool(v) for k, v in flags.items()})
        prop = d.pop("propagation", {})
        if "lambda" in prop:
            prop["debias_lambda"] = prop.pop("lambda")
        kwargs["federation"] = FederationConfig(**fed)
        kwargs["propagation"] = PropagationConfig(**prop)
        allowed = {f.name for f in fields(cls)}
        for key, val in d.items():
            if key not in allowed:
                raise ArgumentError(f"unknown config key {key!r}")
            kwargs[key] = val
        cfg = cls(**kwargs)
        cfg.sync_flags()
        return cfg

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        import yaml
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})

    def sync_flags(self):
        # propagation flags mirror the federation ablation flags
        self.propagation.debias = self.federation.use_debias
        self.propagation.reweight = self.federation.use_reweight
        return self

    def apply_mode(self, mode: str) -> "ExperimentConfig":
        """fedavg / fedbn select the AT baselines; fedrbn enables all
        components on top of fedbn aggregation."""
        if mode not in ("fedavg", "fedbn", "fedrbn"):
            raise ArgumentError(f"unknown mode {mode!r}")
        fed = self.federation
        fed.aggregation_mode = "fedavg" if mode == "fedavg" else "fedbn"
        on = mode == "fedrbn"
        fed.use_dbn = fed.use_detector = fed.use_copy = on
        fed.use_debias = fed.use_reweight = on
        return self.sync_flags()


def build_users(cfg: ExperimentConfig) -> list:
    """Synthesize domains, partition them into users and assign AT/ST roles."""
    dc = cfg.data
    specs = make_domain_specs(dc.domains, dc.classes, dc.dim, cfg.seed,
                              noise_scale=dc.noise_scale)
    K = dc.users_per_domain
    per_user_pool = dc.train_per_user + dc.val_per_user
    val_ratio = dc.val_per_user / per_user_pool
    init_rng = np.random.default_rng([cfg.seed, 2])
    template = build_mlp(dc.dim, cfg.hidden, dc.classes, init_rng)
    users = []
    uid = 0
    for spec in specs:
        pool = sample_domain(spec, K * per_user_pool, cfg.seed, split="train",
                             feature_scale=dc.feature_scale)
        test_pool = sample_domain(spec, K * dc.test_per_user, cfg.seed,
                                  split="test", feature_scale=dc.feature_scale)
        shards = partition_users(pool, K, scheme=dc.scheme,
                                 seed=cfg.seed + spec.domain_id,
                                 beta=dc.dirichlet_beta,
                                 min_size=2 * cfg.federation.batch_size)
        test_shards = partition_users(test_pool, K, scheme="uniform",
                                      seed=cfg.seed + spec.domain_id)
        if cfg.at_domains is not None:
            n_at = K if spec.domain_id in cfg.at_domains else 0
        else:
            n_at = int(round(cfg.at_ratio * K))
        for k in range(K):
            train, val = split_train_val(shards[k], val_ratio,
                                         seed=cfg.seed + uid)
            test = test_shards[k]
            test.split = "test"
            q = 0.5 if k < n_at else 0.0  # lowest user indices do AT
            users.append(UserState(user_id=uid, domain_id=spec.domain_id,
                                   q=q, train=train, val=val, test=test,
                                   model=clone_model(template),
                                   seed=cfg.seed))
            uid += 1
    if not any(u.q > 0 for u in users) and cfg.federation.use_copy:
        raise ArgumentError("copy enabled but no AT user is assigned")
    return users


def evaluate(users: list, atk: AttackConfig, use_detector: bool) -> list:
    """Per-user (SA, RA) on the full test set.

    Attacks are generated white-box against the clean BN path. With
    use_detector, predictions come from the two-pass detector pipeline;
    otherwise from the plain clean-path argmax.
    """
    rows = []
    for u in users:
        x, y = u.test.x, u.test.y
        u.model.set_mode(h=0, training=False)
        x_adv = pgd_attack(u.model, x, y, atk)
        if use_detector and u.detector is not None:
            pred_c, _ = robust_predict(u.model, u.detector, x)
            pred_a, _ = robust_predict(u.model, u.detector, x_adv)
        else:
            pred_c = predict(u.model, x)
            u.model.set_mode(h=0, training=False)
            pred_a = predict(u.model, x_adv)
        rows.append((float(np.mean(pred_c == y)), float(np.mean(pred_a == y))))
    return rows


def detector_holdout_accuracy(user: UserState, atk: AttackConfig) -> float:
    """Clean-vs-adversarial detection accuracy on the user's test logits."""
    if user.detector is None:
        return float("nan")
    model = user.model
    model.set_mode(h=0, training=False)
    x, y = user.test.x, user.test.y
    clean_logits = forward(model, x)
    x_adv = pgd_attack(model, x, y, atk)
    adv_logits = forward(model, x_adv)
    pred_c = user.detector.predict(clean_logits)
    pred_a = user.detector.predict(adv_logits)
    return float((np.mean(pred_c == 0) + np.mean(pred_a == 1)) / 2.0)


def fit_detectors(users: list, atk: AttackConfig, C: float = 10.0):
    """Per-user detector fit on local validation data (clean-path logits)."""
    for u in users:
        data = build_detector_dataset(u.model, u.val.x, u.val.y, atk)
        n = len(u.val)
        u.aux_flops += model_flops(u.model, n) * (2 + 3 * atk.steps)
        u.detector = fit_detector(data, C=C, gamma=1.0 / u.classes)
        # kernel matrix construction dominates the SMO cost
        u.aux_flops += 3 * (2 * n) ** 2 * u.classes
    return users


def propagate_all(users: list, cfg: PropagationConfig) -> list:
    """Propagate noise stats from AT users to every ST user.

    Returns propagation log rows (target_id, source_id, layer, d_W, alpha).
    """
    sources = [u for u in users if u.q > 0]
    if not sources:
        raise ArgumentError("no AT users to propagate from")
    log = []
    src_bundles = [StatBundle.from_model(u.model, owner=u.user_id)
                   for u in sources]
    for u in users:
        if u.q > 0:
            continue
        _, alpha = propagate(u, sources, cfg)
        tgt = StatBundle.from_model(u.model, owner=u.user_id)
        for src_u, src_b, a in zip(sources, src_bundles, alpha):
            for l, d in enumerate(pairwise_distances(src_b, tgt)):
                log.append({"target_id": u.user_id, "source_id": src_u.user_id,
                            "layer": l, "d_W": d, "alpha": float(a)})
            u.aux_flops += 10 * sum(tgt.channels)
    return log


def _fmt(v) -> str:
    if isinstance(v, float):
        return "%.17g" % v
    return str(v)


def write_csv(path, rows: list, columns: list):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row[c]) for c in columns) + "\n")


HISTORY_COLUMNS = ["round", "user_id", "domain_id", "group", "loss",
                   "SA", "RA", "flops"]
FINAL_COLUMNS = ["user_id", "domain_id", "group", "SA", "RA", "detector_acc"]
PROP_COLUMNS = ["target_id", "source_id", "layer", "d_W", "alpha"]


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Full pipeline: train -> propagate -> fit detectors -> evaluate.

    Writes history.csv, final.csv, propagation.csv and a checkpoint under
    cfg.out_dir; returns a summary dict with per-group mean SA/RA.
    """
    cfg.sync_flags()
    os.makedirs(cfg.out_dir, exist_ok=True)
    fed = cfg.federation
    users = build_users(cfg)
    users, history = run_federated_training(
        users, fed, workers=cfg.workers, eval_cap=cfg.history_eval_cap,
        select_best=cfg.select_best)
    restore_best_models(users)

    prop_log = []
    if fed.use_copy and fed.use_dbn and any(u.q > 0 for u in users):
        prop_log = propagate_all(users, cfg.propagation)
    if fed.use_detector:
        fit_detectors(users, fed.attack)

    results = evaluate(users, fed.attack, fed.use_detector)
    final_rows = []
    for u, (sa, ra) in zip(users, results):
        final_rows.append({"user_id": u.user_id, "domain_id": u.domain_id,
                           "group": "AT" if u.q > 0 else "ST",
                           "SA": sa, "RA": ra,
                           "detector_acc": detector_holdout_accuracy(u, fed.attack)})

    write_csv(os.path.join(cfg.out_dir, "history.csv"), history, HISTORY_COLUMNS)
    write_csv(os.path.join(cfg.out_dir, "final.csv"), final_rows, FINAL_COLUMNS)
    write_csv(os.path.join(cfg.out_dir, "propagation.csv"), prop_log, PROP_COLUMNS)
    global_params = aggregate(users, fed.aggregation_mode)
    save_checkpoint(os.path.join(cfg.out_dir, "checkpoint.bin"),
                    fed.rounds, global_params, users)

    def group_mean(group, key):
        vals = [r[key] for r in final_rows if r["group"] == group]
        return float(np.mean(vals)) if vals else float("nan")

    summary = {
        "SA": float(np.mean([r["SA"] for r in final_rows])),
        "RA": float(np.mean([r["RA"] for r in final_rows])),
        "SA_AT": group_mean("AT", "SA"), "RA_AT": group_mean("AT", "RA"),
        "SA_ST": group_mean("ST", "SA"), "RA_ST": group_mean("ST", "RA"),
        "train_flops": int(sum(u.train_flops for u in users)),
        "aux_flops": int(sum(u.aux_flops for u in users)),
        "rows": final_rows,
        "users": users,
    }
    return summary
