"""Experiment orchestration: config parsing and the run pipeline.

A run is: ingest -> split -> pretrain -> meta-train (per variant) ->
meta-test -> evaluate every method -> write reports. Every stochastic choice
draws from named child streams of the run seed, and all per-user reductions
happen in ascending user-id order, so a run is a pure function of
(config, seed): two runs produce byte-identical reports and checkpoints.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import (
    LevelSelector,
    LevelSelectorConfig,
    build_meta_feature_rows,
    dump_meta_features,
    perfect_selector,
)
from .data import (
    SyntheticSpec,
    generate_synthetic,
    load_dump,
    load_movielens,
    save_dump,
    split_users,
    write_exclusion_report,
)
from .evaluation import (
    EvalRecord,
    best_model_proportions,
    evaluate_predictions,
    per_user_loss_export,
    write_proportions_csv,
    write_table_report,
)
from .meta import (
    MetaTrainConfig,
    make_meta_state,
    meta_test,
    meta_train,
    save_meta_state,
)
from .models import (
    ModelSpec,
    PretrainConfig,
    forward_batch,
    init_params,
    pretrain,
    save_bank,
)
from .numkit import Rng
from .selector import SelectorSpec, init_selector

META_METHOD = "meta_mix"
META_SIMPLIFIED = "meta_mix_simplified"
META_POOLED = "meta_mix_pooled"


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def parse_kv_text(text: str) -> dict:
    """Flat key = value lines; '#' starts a comment; later keys win."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        key, _, val = line.partition("=")
        out[key.strip()] = val.strip()
    return out


def _get(kv, key, default=None, cast=str):
    if key not in kv:
        if default is None:
            raise ConfigError(f"config key '{key}' is required")
        return default
    raw = kv[key]
    if cast is bool:
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"config key '{key}': not a boolean: {raw!r}")
    try:
        return cast(raw)
    except ValueError as e:
        raise ConfigError(f"config key '{key}': {e}") from None


def _tuple(raw: str, cast):
    return tuple(cast(t.strip()) for t in raw.split(",") if t.strip())


@dataclass
class ExperimentConfig:
    seed: int
    dataset_kind: str                       # synthetic | movielens | dump
    dataset_path: str = ""
    out_dir: str = "runs"
    threads: int = 1
    model_kinds: tuple = ("lr", "fm", "ffm", "deepfm")
    fm_latent_dim: int = 10
    ffm_latent_dim: int = 10
    deepfm_hidden: tuple = (256, 256, 256)
    deepfm_keep_prob: float = 0.9
    selector_embed_dim: int = 16
    selector_hidden: tuple = (200, 200, 200)
    train_frac: float = 0.8
    support_frac: float = 0.75
    min_samples: int = 8
    holdout_user_frac: float = 0.0
    pretrain_epochs: int = 5
    pretrain_batch: int = 1000
    pretrain_adam_lr: float = 1e-3
    pretrain_pool: str = "support"          # support | train
    meta_m: int = 10
    meta_episodes: int = 100
    meta_alpha_init: float = 0.001
    meta_beta: float | None = None          # defaults to alpha/10
    meta_mode: str = "exact_hvp"
    meta_variants: tuple = ("full", "simplified")
    meta_alpha_learned: bool = True
    meta_outer: str = "sgd"
    meta_fine_tune_steps: int = 1
    baseline_hidden: tuple = (400, 400, 400)
    baseline_epochs: int = 30
    baseline_lr: float = 1e-3
    synthetic: SyntheticSpec | None = None
    config_text: str = ""

    @property
    def beta(self) -> float:
        return self.meta_beta if self.meta_beta is not None else self.meta_alpha_init / 10.0

    def digest(self) -> str:
        return hashlib.sha256(self.config_text.encode("utf-8")).hexdigest()


def config_from_text(text: str, overrides: dict | None = None) -> ExperimentConfig:
    kv = parse_kv_text(text)
    if overrides:
        kv.update({k: str(v) for k, v in overrides.items() if v is not None})
    seed = _get(kv, "seed", cast=int)   # mandatory
    kind = _get(kv, "dataset.kind", cast=str)
    if kind not in ("synthetic", "movielens", "dump"):
        raise ConfigError(f"unknown dataset.kind {kind!r}")
    synth = None
    if kind == "synthetic":
        n_clusters = _get(kv, "synthetic.num_clusters", 2, int)
        synth = SyntheticSpec(
            num_users=_get(kv, "synthetic.num_users", 200, int),
            samples_per_user=_get(kv, "synthetic.samples_per_user", 100, int),
            num_clusters=n_clusters,
            cluster_kinds=_tuple(_get(kv, "synthetic.cluster_kinds", "linear,factorized"), str)[:n_clusters],
            cluster_weights=_tuple(_get(kv, "synthetic.cluster_weights", ",".join(["1"] * n_clusters)), float),
            scales=_tuple(_get(kv, "synthetic.scales", ",".join(["1.5"] * n_clusters)), float),
            noise=_get(kv, "synthetic.noise", 1.0, float),
            num_fields=_get(kv, "synthetic.num_fields", 4, int),
            buckets_per_field=_get(kv, "synthetic.buckets_per_field", 8, int),
            seed=_get(kv, "synthetic.seed", str(seed), int),
        )
    mode = _get(kv, "meta.mode", "exact", str)
    mode = {"exact": "exact_hvp", "exact_hvp": "exact_hvp",
            "first-order": "first_order", "first_order": "first_order"}.get(mode)
    if mode is None:
        raise ConfigError("meta.mode must be 'exact' or 'first-order'")
    cfg = ExperimentConfig(
        seed=seed,
        dataset_kind=kind,
        dataset_path=_get(kv, "dataset.path", "", str),
        out_dir=_get(kv, "out", "runs", str),
        threads=_get(kv, "threads", 1, int),
        model_kinds=_tuple(_get(kv, "models", "lr,fm,ffm,deepfm"), str),
        fm_latent_dim=_get(kv, "fm.latent_dim", 10, int),
        ffm_latent_dim=_get(kv, "ffm.latent_dim", 10, int),
        deepfm_hidden=_tuple(_get(kv, "deepfm.hidden", "256,256,256"), int),
        deepfm_keep_prob=_get(kv, "deepfm.keep_prob", 0.9, float),
        selector_embed_dim=_get(kv, "selector.embed_dim", 16, int),
        selector_hidden=_tuple(_get(kv, "selector.hidden", "200,200,200"), int),
        train_frac=_get(kv, "split.train_frac", 0.8, float),
        support_frac=_get(kv, "split.support_frac", 0.75, float),
        min_samples=_get(kv, "split.min_samples", 8, int),
        holdout_user_frac=_get(kv, "holdout.user_frac", 0.0, float),
        pretrain_epochs=_get(kv, "pretrain.epochs", 5, int),
        pretrain_batch=_get(kv, "pretrain.batch", 1000, int),
        pretrain_adam_lr=_get(kv, "pretrain.adam_lr", 1e-3, float),
        pretrain_pool=_get(kv, "pretrain.pool", "support", str),
        meta_m=_get(kv, "meta.m", 10, int),
        meta_episodes=_get(kv, "meta.episodes", 100, int),
        meta_alpha_init=_get(kv, "meta.alpha_init", 0.001, float),
        meta_beta=_get(kv, "meta.beta", -1.0, float),
        meta_mode=mode,
        meta_variants=_tuple(_get(kv, "meta.variants", "full,simplified"), str),
        meta_alpha_learned=_get(kv, "meta.alpha_learned", True, bool),
        meta_outer=_get(kv, "meta.outer", "sgd", str),
        meta_fine_tune_steps=_get(kv, "meta.fine_tune_steps", 1, int),
        baseline_hidden=_tuple(_get(kv, "baselines.hidden", "400,400,400"), int),
        baseline_epochs=_get(kv, "baselines.epochs", 30, int),
        baseline_lr=_get(kv, "baselines.lr", 1e-3, float),
        synthetic=synth,
        config_text=text,
    )
    if cfg.meta_beta is not None and cfg.meta_beta <= 0:
        cfg.meta_beta = None
    for v in cfg.meta_variants:
        if v not in ("full", "simplified"):
            raise ConfigError(f"unknown meta variant {v!r}")
    if cfg.pretrain_pool not in ("support", "train"):
        raise ConfigError("pretrain.pool must be 'support' or 'train'")
    return cfg


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    return config_from_text(Path(path).read_text(encoding="utf-8"), overrides)


@dataclass
class ExperimentResult:
    out_dir: Path
    table_rows: list                      # (method, global EvalRecord)
    per_user: dict                        # method -> list of per-user EvalRecord
    lam_by_user: dict                     # method -> {user_id: mean lambda vector}
    cluster_of: dict | None
    proportions: dict
    training_logs: dict                   # variant -> list of row dicts
    states: dict                          # variant -> MetaState
    base_specs: list
    base_banks: list
    eval_users: list
    train_users: list
    space: object


def _model_spec(kind: str, cfg: ExperimentConfig, num_fields: int) -> ModelSpec:
    latent = {"fm": cfg.fm_latent_dim, "ffm": cfg.ffm_latent_dim}.get(kind, cfg.fm_latent_dim)
    return ModelSpec(
        kind=kind,
        num_fields=num_fields,
        latent_dim=latent,
        hidden_sizes=cfg.deepfm_hidden,
        keep_prob=cfg.deepfm_keep_prob,
    )


def load_dataset(cfg: ExperimentConfig):
    """Returns (space, user sample pools, cluster truth or None, stats dict)."""
    if cfg.dataset_kind == "synthetic":
        data = generate_synthetic(cfg.synthetic)
        stats = {
            "users": len(data.users),
            "items": data.space.num_features,
            "samples": sum(len(u.samples) for u in data.users),
            "features": data.space.num_features,
        }
        return data.space, data.users, data.cluster_of, stats
    if cfg.dataset_kind == "movielens":
        root = Path(cfg.dataset_path)
        space, pools, ing = load_movielens(
            root / "ratings.dat", root / "users.dat", root / "movies.dat"
        )
        stats = {
            "users": ing.n_users,
            "items": ing.n_items,
            "samples": ing.n_samples,
            "features": ing.n_features,
            "skipped_unknown_movie": ing.skipped_unknown_movie,
        }
        return space, pools, None, stats
    if cfg.dataset_kind == "dump":
        space, pools = load_dump(cfg.dataset_path)
        stats = {
            "users": len(pools),
            "items": space.num_features,
            "samples": sum(len(u.samples) for u in pools),
            "features": space.num_features,
        }
        return space, pools, None, stats
    raise ConfigError(f"unknown dataset kind {cfg.dataset_kind!r}")


def partition_users(datasets, holdout_frac: float, seed: int):
    """Disjoint meta-train / evaluation user split (holdout_frac > 0), or the
    paper-style shared population (holdout_frac == 0)."""
    datasets = sorted(datasets, key=lambda u: u.user_id)
    if holdout_frac <= 0:
        return datasets, datasets
    n = len(datasets)
    n_eval = int(round(holdout_frac * n))
    n_eval = min(max(n_eval, 1), n - 1)
    perm = Rng(seed).child("user_holdout").permutation(n)
    eval_ids = {datasets[i].user_id for i in perm[:n_eval]}
    train = [d for d in datasets if d.user_id not in eval_ids]
    evals = [d for d in datasets if d.user_id in eval_ids]
    return train, evals


def _parallel_map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


_STAGES = ("ingest", "pretrain", "meta_train", "evaluate", "report")


def _empty_result(run_dir, space=None, cluster_of=None) -> "ExperimentResult":
    return ExperimentResult(
        out_dir=run_dir, table_rows=[], per_user={}, lam_by_user={},
        cluster_of=cluster_of, proportions={}, training_logs={}, states={},
        base_specs=[], base_banks=[], eval_users=[], train_users=[], space=space,
    )


def run_experiment(cfg: ExperimentConfig, out_dir=None, write_figures: bool = True,
                   until: str = "report") -> ExperimentResult:
    """Execute the pipeline through stage ``until``, writing seed-stamped
    artifacts as it goes.

    Raises StageError naming the failing stage; artifacts written by earlier
    stages stay on disk.
    """
    if until not in _STAGES:
        raise ConfigError(f"unknown stage {until!r}")
    stop_at = _STAGES.index(until)
    out = Path(out_dir) if out_dir is not None else Path(cfg.out_dir)
    run_dir = out / f"s{cfg.seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    root_rng = Rng(cfg.seed)

    stage = "ingest"
    try:
        space, pools, cluster_of, stats = load_dataset(cfg)
        save_dump(run_dir / "dataset.dump", space, pools)
        with open(run_dir / "stats.csv", "w", encoding="utf-8") as f:
            f.write("key,value\n")
            for k, v in stats.items():
                f.write(f"{k},{v}\n")
        datasets, exclusions = split_users(
            pools, cfg.train_frac, cfg.support_frac, cfg.min_samples
        )
        write_exclusion_report(run_dir / "exclusions.csv", exclusions)
        if not datasets:
            raise ValueError("no admissible users after splitting")
        if stop_at < 1:
            return _empty_result(run_dir, space, cluster_of)

        stage = "partition"
        train_users, eval_users = partition_users(datasets, cfg.holdout_user_frac, cfg.seed)
        if len(train_users) < cfg.meta_m:
            raise ValueError(
                f"{len(train_users)} meta-training users < m={cfg.meta_m}"
            )

        stage = "pretrain"
        specs = [_model_spec(k, cfg, space.num_fields) for k in cfg.model_kinds]
        init_rng = root_rng.child("init:models")
        banks = [init_params(s, space, init_rng) for s in specs]
        part = "support" if cfg.pretrain_pool == "support" else "train"
        pool_samples = [s for u in train_users for s in getattr(u, part)]
        pcfg = PretrainConfig(
            epochs=cfg.pretrain_epochs,
            batch_size=cfg.pretrain_batch,
            adam_lr=cfg.pretrain_adam_lr,
        )
        pretrain(specs, banks, pool_samples, pcfg, root_rng.child("pretrain"))
        ckpt_dir = run_dir / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)
        for k, (spec, bank) in enumerate(zip(specs, banks)):
            save_bank(ckpt_dir / f"pretrained_{spec.kind}_{k}.ckpt", bank,
                      spec.descriptor(), space.digest())
        if stop_at < 2:
            res = _empty_result(run_dir, space, cluster_of)
            res.base_specs, res.base_banks = specs, banks
            res.train_users, res.eval_users = train_users, eval_users
            return res

        stage = "meta_train"
        sel_spec = SelectorSpec(
            num_models=len(specs),
            num_fields=space.num_fields,
            embed_dim=cfg.selector_embed_dim,
            hidden_sizes=cfg.selector_hidden,
        )
        states, logs = {}, {}
        for variant in cfg.meta_variants:
            phi = init_selector(sel_spec, space, root_rng.child(f"init:selector:{variant}"))
            state = make_meta_state(
                specs, banks, sel_spec, phi,
                alpha_init=cfg.meta_alpha_init, beta=cfg.beta,
                mode=cfg.meta_mode, variant=variant,
                alpha_learned=cfg.meta_alpha_learned,
            )
            log_rows: list = []
            meta_train(state, train_users,
                       MetaTrainConfig(episodes=cfg.meta_episodes, m=cfg.meta_m,
                                       outer=cfg.meta_outer, seed=cfg.seed),
                       log=log_rows)
            states[variant] = state
            logs[variant] = log_rows
            save_meta_state(ckpt_dir / f"meta_{variant}", state, space)
            with open(run_dir / f"training_log_{variant}.csv", "w", encoding="utf-8") as f:
                f.write("episode,mean_query_loss,mean_support_loss,wallclock_ms\n")
                for row in log_rows:
                    f.write(f"{row['episode']},{row['mean_query_loss']:.10g},"
                            f"{row['mean_support_loss']:.10g},{row['wallclock_ms']:.3f}\n")
        if stop_at < 3:
            res = _empty_result(run_dir, space, cluster_of)
            res.base_specs, res.base_banks = specs, banks
            res.train_users, res.eval_users = train_users, eval_users
            res.states, res.training_logs = states, logs
            return res

        stage = "evaluate"
        result = _evaluate_all(cfg, run_dir, space, specs, banks, sel_spec,
                               states, train_users, eval_users, cluster_of)
        result.training_logs = logs
        result.states = states

        _write_manifest(cfg, run_dir, train_users, eval_users)
        if stop_at < 4:
            return result

        stage = "report"
        if write_figures:
            from .figures import render_run_figures

            render_run_figures(run_dir)
        return result
    except StageError:
        raise
    except Exception as e:
        raise StageError(stage, e) from e


def _evaluate_all(cfg, run_dir, space, specs, banks, sel_spec, states,
                  train_users, eval_users, cluster_of) -> ExperimentResult:
    eval_users = sorted(eval_users, key=lambda u: u.user_id)
    test_uids = np.array([u.user_id for u in eval_users for _ in u.test])
    test_y = np.array([s.label for u in eval_users for s in u.test], dtype=np.int64)

    # single-model predictions over the pooled evaluation test set
    single_preds = {}
    for spec, bank in zip(specs, banks):
        parts = [forward_batch(spec, bank, u.packed("test"))[0] for u in eval_users]
        single_preds[spec.kind] = np.concatenate(parts)
    pred_matrix = np.column_stack([single_preds[s.kind] for s in specs])

    methods: list = []
    per_user: dict = {}
    preds_by_method: dict = {}

    for spec in specs:
        preds_by_method[spec.kind] = single_preds[spec.kind]

    # oracles
    for gran, name in (("sample", "oracle_sample"), ("user", "oracle_user")):
        _assign, chosen = perfect_selector(gran, pred_matrix, test_y, test_uids)
        preds_by_method[name] = chosen

    # trained level selectors: meta-features from the pretrained models on the
    # meta-training users' query portions (the held-out quarter of train)
    q_uids = np.array([u.user_id for u in train_users for _ in u.query])
    q_y = np.array([s.label for u in train_users for s in u.query], dtype=np.int64)
    q_parts = [
        np.column_stack([forward_batch(spec, bank, u.packed("query"))[0]
                         for spec, bank in zip(specs, banks)])
        for u in train_users
    ]
    q_matrix = np.vstack(q_parts)
    rows = build_meta_feature_rows(q_matrix, q_y, q_uids)
    dump_meta_features(run_dir / "meta_features.csv", rows)
    lcfg = LevelSelectorConfig(hidden=cfg.baseline_hidden, epochs=cfg.baseline_epochs,
                               lr=cfg.baseline_lr, seed=cfg.seed)
    for gran, name in (("sample", "mlp_sample"), ("user", "mlp_user")):
        clf = LevelSelector(gran, len(specs), lcfg).fit(rows)
        preds_by_method[name] = clf.predict(pred_matrix, test_uids)

    # meta-learned mixtures
    lam_by_user: dict = {}
    for variant, method in (("full", META_METHOD), ("simplified", META_SIMPLIFIED)):
        if variant not in states:
            continue
        state = states[variant]
        results = _parallel_map(
            lambda u: meta_test(state, u, cfg.meta_fine_tune_steps),
            eval_users, cfg.threads,
        )
        preds_by_method[method] = np.concatenate([r.p for r in results])
        lam_by_user[method] = {r.user_id: r.lam_mean for r in results}
        if variant == "simplified":
            preds_by_method[META_POOLED] = np.concatenate([r.p_pooled for r in results])
            lam_by_user[META_POOLED] = {r.user_id: r.lam_pooled for r in results}

    # records + report
    for name, preds in preds_by_method.items():
        glob, per = evaluate_predictions(preds, test_y, test_uids)
        methods.append((name, glob))
        per_user[name] = per

    single_aucs = {s.kind: dict(methods)[s.kind].auc for s in specs}
    best_single = max(single_aucs, key=lambda k: single_aucs[k])
    write_table_report(run_dir / "report.csv", methods, best_single)
    per_user_loss_export(run_dir / "per_user_loss.csv", per_user)

    # Table-1 style proportions from the single models' per-user losses
    per_user_losses: dict = {}
    for u in eval_users:
        mask = test_uids == u.user_id
        per_user_losses[u.user_id] = [
            float(np.mean(_user_losses(preds_by_method[s.kind][mask], test_y[mask])))
            for s in specs
        ]
    proportions = best_model_proportions(per_user_losses, [s.kind for s in specs])
    write_proportions_csv(run_dir / "proportions.csv", proportions)

    _write_selector_weights(run_dir / "selector_weights.csv", lam_by_user)

    return ExperimentResult(
        out_dir=run_dir,
        table_rows=methods,
        per_user=per_user,
        lam_by_user=lam_by_user,
        cluster_of=cluster_of,
        proportions=proportions,
        training_logs={},
        states=states,
        base_specs=specs,
        base_banks=banks,
        eval_users=eval_users,
        train_users=train_users,
        space=space,
    )


def _user_losses(p, y):
    from .numkit import logloss_vec

    return logloss_vec(p, y)


def _write_selector_weights(path, lam_by_user: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("method,user_id,weights\n")
        for method in sorted(lam_by_user):
            for uid in sorted(lam_by_user[method]):
                w = ";".join(f"{x:.10g}" for x in lam_by_user[method][uid])
                f.write(f"{method},{uid},{w}\n")


def _write_manifest(cfg: ExperimentConfig, run_dir: Path, train_users, eval_users) -> None:
    manifest = {
        "config_digest": cfg.digest(),
        "code_version": __version__,
        "seed": cfg.seed,
        "mode": cfg.meta_mode,
        "variants": list(cfg.meta_variants),
        "meta_train_users": len(train_users),
        "eval_users": len(eval_users),
        "disjoint_user_populations": cfg.holdout_user_frac > 0,
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
