"""Experiment harness: scenes, baselines, metrics and report files.

A cell is (scene, method, seed). All methods sharing a seed face the same
test-market realization, so cross-method comparisons are paired. Reports are
CSV (byte-reproducible for fixed seeds); trace files carry per-slot curves
and figures are rendered next to them.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import fca, rla
from .config import ConfigError, ScenarioConfig, desk_scale, load_scene
from .dual import AllocationProblem, assign, spend_summary, ternary_search_lambda
from .estimators import TrainConfig, train_target
from .rla import DecisionModels, EpisodeRefs, GaussianPolicy, RlaConfig
from .simulator import RideGym, run_logged_episode


class BaselineKind(Enum):
    OPT = "opt"
    PDM_A = "pdm-a"
    PDM_S = "pdm-s"
    FCA_RL = "fca-rl"
    RL_NO_FCA = "rl-nofca"


RL_KINDS = (BaselineKind.FCA_RL, BaselineKind.RL_NO_FCA)


class UndefinedMetricError(ValueError):
    """A metric's denominator vanished."""


@dataclass
class StrategyConfig:
    """Knobs of the coupon campaign and the harness."""

    coupons: tuple[float, ...] = (0.0, 0.05, 0.10, 0.15, 0.20)
    budget_rate: float = 0.05
    clusters: int = 16
    window: int = 24
    episodes: int = 200
    full_scale: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.budget_rate < 1.0:
            raise ConfigError("budget_rate must be in (0, 1)")
        if self.clusters < 1 or self.window < 1 or self.episodes < 1:
            raise ConfigError("clusters, window and episodes must be positive")

    @classmethod
    def from_dict(cls, raw: dict) -> "StrategyConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown strategy fields: {sorted(unknown)}")
        kwargs = dict(raw)
        if "coupons" in kwargs:
            kwargs["coupons"] = tuple(kwargs["coupons"])
        return cls(**kwargs)


# -- metrics -------------------------------------------------------------------


def metric_cre(total_cost: float, total_gmv: float, cr_star: float) -> tuple[float, str]:
    """|cost rate - target|, flagged over/under."""
    if total_gmv <= 0:
        raise UndefinedMetricError("CRE undefined: zero GMV")
    rate = total_cost / total_gmv
    return abs(rate - cr_star), ("over" if rate > cr_star else "under")

def metric_froi(f: float, f0: float, c: float, a: float, a0: float) -> float:
    """Incremental completions per ASP-normalized subsidy unit."""
    if c <= 0:
        raise UndefinedMetricError("FROI not applicable: zero subsidy cost")
    if a <= 0:
        raise UndefinedMetricError("FROI undefined: zero ASP")
    return (f - f0) / ((a0 / a) * c)


def metric_rlr(r_obs_total: float, r_star: float, cr: float, cr_star: float) -> float:
    """Normalized completions minus the over-budget penalty."""
    if r_star <= 0:
        raise UndefinedMetricError("RLR undefined: nonpositive reference completions")
    return r_obs_total / r_star - rla.constraint_penalty(cr, cr_star)


# -- scene preparation -----------------------------------------------------------


@dataclass
class ScenePrep:
    """Everything solved once per scene before evaluation cells run."""

    scene: int
    config: ScenarioConfig
    strategy: StrategyConfig
    coupons: np.ndarray
    models: DecisionModels
    w_model: object
    z_model: object
    prior_tracker: fca.BetaTracker
    test_multipliers: np.ndarray
    test_offset: int
    lam_pdm_a: float
    lam_pdm_s: float
    refs: EpisodeRefs

    def with_window(self, window: int) -> "ScenePrep":
        tracker = fca.BetaTracker(
            self.prior_tracker.prior_alpha, self.prior_tracker.prior_beta, window
        )
        return dataclasses.replace(self, prior_tracker=tracker)


def prepare_scene(
    scene: int,
    strategy: StrategyConfig | None = None,
    scenario_overrides: dict | None = None,
) -> ScenePrep:
    """Train estimators and solve the static references for one scene."""
    strategy = strategy or StrategyConfig()
    config = load_scene(scene)
    if not strategy.full_scale:
        config = desk_scale(config)
    if scenario_overrides:
        config = ScenarioConfig.from_dict({**dataclasses.asdict(config), **scenario_overrides})
    coupons = np.asarray(strategy.coupons, dtype=float)
    b = strategy.budget_rate

    pre = run_logged_episode(config, coupons, config.slots_pretrain)
    train_cfg = TrainConfig()
    w_model = train_target(pre, coupons, "w", train_cfg, seed=0)
    f_in_model = train_target(pre, coupons, "f_in", train_cfg, seed=0)
    z_model = train_target(pre, coupons, "z", train_cfg, seed=0)
    beta_model = train_target(
        pre, coupons, "beta", train_cfg, seed=0, anchor=config.num_rsps + 1.0
    )
    cluster_model = fca.kmeans_fit(
        pre.features, strategy.clusters, np.random.default_rng((config.seed, 5))
    )
    prior_tracker = fca.init_priors(
        cluster_model, beta_model, pre.features, coupons, window=strategy.window
    )
    models = DecisionModels(
        beta_model=beta_model, f_in_model=f_in_model, cluster_model=cluster_model
    )

    train_log = run_logged_episode(
        config,
        coupons,
        config.slots_train,
        start_multipliers=pre.end_multipliers,
        slot_offset=config.slots_pretrain,
        keep_truth=True,
    )
    # static references are solved on the whole train split, scaled per test slot
    ref_x = train_log.features
    ref_g = train_log.base_price
    ref_truth = train_log.truth_complete

    gt_problem = AllocationProblem(ref_truth.astype(float), ref_g, coupons, b)
    lam_gt = ternary_search_lambda(gt_problem)
    r_train, _, gmv_train = spend_summary(gt_problem, assign(gt_problem, lam_gt))
    scale = config.slots_test / config.slots_train
    r_star, gmv_ref = r_train * scale, gmv_train * scale

    z_pdm_s = w_model.predict_matrix(ref_x, coupons) * f_in_model.predict_matrix(ref_x, coupons)
    lam_pdm_s = ternary_search_lambda(AllocationProblem(z_pdm_s, ref_g, coupons, b))
    z_pdm_a = z_model.predict_matrix(ref_x, coupons)
    lam_pdm_a = ternary_search_lambda(AllocationProblem(z_pdm_a, ref_g, coupons, b))

    # the RL controller starts from the multiplier of its own estimate field
    # (tracker-refined, Beta-sampled w), not the deterministic PDM-S one
    clusters_ref = cluster_model.assign(ref_x)
    a_ori, b_ori = beta_model.predict_matrix(ref_x, coupons)
    a_ref, b_ref = fca.refine_w(prior_tracker, clusters_ref, a_ori, b_ori)
    w_ref = fca.sample_w(a_ref, b_ref, np.random.default_rng((config.seed, 6)))
    z_fca = w_ref * f_in_model.predict_matrix(ref_x, coupons)
    lam_fca0 = ternary_search_lambda(AllocationProblem(z_fca, ref_g, coupons, b))

    refs = EpisodeRefs(
        lam_star0=lam_fca0,
        r_star=r_star,
        cr_star=b,
        gmv_ref=gmv_ref,
        lam_lb=0.0,
        lam_ub=10.0 * lam_fca0,
    )
    return ScenePrep(
        scene=scene,
        config=config,
        strategy=strategy,
        coupons=coupons,
        models=models,
        w_model=w_model,
        z_model=z_model,
        prior_tracker=prior_tracker,
        test_multipliers=train_log.end_multipliers,
        test_offset=config.slots_pretrain + config.slots_train,
        lam_pdm_a=lam_pdm_a,
        lam_pdm_s=lam_pdm_s,
        refs=refs,
    )


# -- evaluation cells --------------------------------------------------------------


@dataclass
class CellResult:
    method: str
    scene: int
    seed: int
    cre: float
    direction: str
    froi: float | None
    rlr: float
    completions: float
    cost: float
    gmv: float
    trace: list[dict] = field(default_factory=list)
    tracker_rows: list[tuple] = field(default_factory=list)


def _test_context(seed: int) -> tuple[int, int, int]:
    return (1, seed, 0)


def _finalize_cell(
    kind: BaselineKind,
    prep: ScenePrep,
    seed: int,
    per_slot: list[dict],
    twin: tuple[float, float, float],
) -> CellResult:
    completions = sum(row["completions"] for row in per_slot)
    cost = sum(row["cost"] for row in per_slot)
    gmv = sum(row["gmv"] for row in per_slot)
    cre, direction = metric_cre(cost, gmv, prep.strategy.budget_rate)
    cr = cost / gmv if gmv > 0 else 0.0
    rlr = metric_rlr(completions, prep.refs.r_star, cr, prep.refs.cr_star)
    f0, _, a0 = twin
    paid = gmv - cost
    try:
        froi = metric_froi(
            completions, f0, cost, paid / completions if completions else 0.0, a0
        )
    except UndefinedMetricError:
        froi = None
    trace = []
    cum_cost = cum_gmv = 0.0
    for row in per_slot:
        cum_cost += row["cost"]
        cum_gmv += row["gmv"]
        trace.append(
            {
                "slot": row["slot"],
                "irr_mean": row["irr"],
                "lambda": row["lambda"],
                "cost_rate": cum_cost / cum_gmv if cum_gmv > 0 else 0.0,
                "completions": row["completions"],
            }
        )
    return CellResult(
        method=kind.value,
        scene=prep.scene,
        seed=seed,
        cre=cre,
        direction=direction,
        froi=froi,
        rlr=rlr,
        completions=completions,
        cost=cost,
        gmv=gmv,
        trace=trace,
    )


def _run_opt_cell(prep: ScenePrep, seed: int) -> CellResult:
    """Clairvoyant static multiplier on the test episode's own ground truth."""
    config = prep.config
    log = run_logged_episode(
        config,
        prep.coupons,
        config.slots_test,
        context=_test_context(seed),
        start_multipliers=prep.test_multipliers,
        slot_offset=prep.test_offset,
        keep_truth=True,
    )
    problem = AllocationProblem(
        log.truth_complete.astype(float), log.base_price, prep.coupons, prep.strategy.budget_rate
    )
    lam = ternary_search_lambda(problem)
    assignment = assign(problem, lam)
    rows = np.arange(assignment.size)
    complete = log.truth_complete[rows, assignment]
    d_chosen = prep.coupons[assignment]
    cost_i = np.where(complete, log.base_price * d_chosen, 0.0)
    gmv_i = np.where(complete, log.base_price, 0.0)
    in_range_i = log.truth_in_range[rows, assignment]

    per_slot = []
    for t in range(config.slots_test):
        mask = log.slot == prep.test_offset + t
        per_slot.append(
            {
                "slot": prep.test_offset + t,
                "completions": float(complete[mask].sum()),
                "cost": float(cost_i[mask].sum()),
                "gmv": float(gmv_i[mask].sum()),
                "irr": float(in_range_i[mask].mean()) if mask.any() else 0.0,
                "lambda": lam,
            }
        )
    f0 = float(log.truth_complete[:, 0].sum())
    gmv0 = float((log.base_price * log.truth_complete[:, 0]).sum())
    twin = (f0, gmv0, gmv0 / f0 if f0 else 0.0)
    return _finalize_cell(BaselineKind.OPT, prep, seed, per_slot, twin)


def _run_pdm_cell(kind: BaselineKind, prep: ScenePrep, seed: int) -> CellResult:
    """Static multiplier solved on the train reference, model estimates per slot."""
    config = prep.config
    lam = prep.lam_pdm_a if kind is BaselineKind.PDM_A else prep.lam_pdm_s
    env = RideGym(
        config,
        prep.coupons,
        context=_test_context(seed),
        start_multipliers=prep.test_multipliers,
        slot_offset=prep.test_offset,
    )
    per_slot = []
    for t in range(config.slots_test):
        staged = env.begin_slot(t)
        x = staged.orders.features
        if staged.n:
            if kind is BaselineKind.PDM_A:
                z_hat = prep.z_model.predict_matrix(x, prep.coupons)
            else:
                z_hat = prep.w_model.predict_matrix(x, prep.coupons) * \
                    prep.models.f_in_model.predict_matrix(x, prep.coupons)
            problem = AllocationProblem(
                z_hat, staged.orders.base_price, prep.coupons, prep.strategy.budget_rate
            )
            assignment = assign(problem, lam)
        else:
            assignment = np.zeros(0, dtype=int)
        outcome = env.complete_slot(staged, assignment)
        per_slot.append(
            {
                "slot": outcome.slot_index,
                "completions": float(outcome.completions),
                "cost": outcome.total_cost,
                "gmv": outcome.total_gmv,
                "irr": outcome.in_range_rate,
                "lambda": lam,
            }
        )
    twin = rla.run_zero_coupon_twin(
        config, prep.coupons, _test_context(seed), prep.test_multipliers,
        prep.test_offset, config.slots_test,
    )
    return _finalize_cell(kind, prep, seed, per_slot, twin)


def _run_rl_cell(
    kind: BaselineKind,
    prep: ScenePrep,
    seed: int,
    policy: GaussianPolicy,
    collect_tracker_rows: bool = False,
) -> CellResult:
    config = prep.config
    cfg = rl_config(prep.strategy, seed, use_fca=kind is BaselineKind.FCA_RL)
    env = RideGym(
        config,
        prep.coupons,
        context=_test_context(seed),
        start_multipliers=prep.test_multipliers,
        slot_offset=prep.test_offset,
    )
    tracker = prep.prior_tracker.copy()
    eval_rng = np.random.default_rng((config.seed, 7, seed))
    result = rla.rollout_episode(
        env,
        policy,
        tracker,
        prep.models,
        prep.refs.lam_star0,
        prep.refs,
        cfg,
        config.slots_test,
        eval_rng,
        deterministic=False,  # evaluate the stochastic policy as trained
        collect_tracker_rows=collect_tracker_rows,
    )
    per_slot = [
        {
            "slot": out.slot_index,
            "completions": float(out.completions),
            "cost": out.total_cost,
            "gmv": out.total_gmv,
            "irr": out.in_range_rate,
            "lambda": float(result.lambda_trace[t]),
        }
        for t, out in enumerate(result.outcomes)
    ]
    twin = rla.run_zero_coupon_twin(
        config, prep.coupons, _test_context(seed), prep.test_multipliers,
        prep.test_offset, config.slots_test,
    )
    cell = _finalize_cell(kind, prep, seed, per_slot, twin)
    if collect_tracker_rows:
        cell.tracker_rows = result.tracker_rows
    return cell


def rl_config(strategy: StrategyConfig, seed: int, use_fca: bool) -> RlaConfig:
    return RlaConfig(
        episodes=strategy.episodes,
        window=strategy.window,
        use_fca=use_fca,
        seed=seed,
    )


def train_rl_policy(
    prep: ScenePrep,
    seed: int,
    use_fca: bool = True,
    checkpoint_dir: Path | None = None,
    episodes: int | None = None,
) -> tuple[GaussianPolicy, list[rla.TrainEpisodeRecord]]:
    """Train the multiplier policy for one (scene, seed, window, fca) cell."""
    cfg = rl_config(prep.strategy, seed, use_fca)
    if episodes is not None:
        cfg = dataclasses.replace(cfg, episodes=episodes)
    if checkpoint_dir is not None:
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
    policy, _, history = rla.train_policy(
        prep.config,
        prep.coupons,
        prep.models,
        prep.prior_tracker,
        prep.refs,
        cfg,
        prep.test_multipliers,
        prep.test_offset,
        prep.config.slots_test,
        checkpoint_dir=checkpoint_dir,
    )
    return policy, history


def training_curve_rows(prep: ScenePrep, history: list[rla.TrainEpisodeRecord]) -> list[dict]:
    """(episode, RLR, CRE, FROI) rows for the training curve CSV."""
    rows = []
    for rec in history:
        cre, _ = metric_cre(rec.cost, rec.gmv, prep.strategy.budget_rate)
        rlr = metric_rlr(rec.completions, prep.refs.r_star, rec.cr, prep.refs.cr_star)
        paid = rec.gmv - rec.cost
        a = paid / rec.completions if rec.completions else 0.0
        a0 = rec.twin_gmv / rec.twin_completions if rec.twin_completions else 0.0
        try:
            froi = metric_froi(rec.completions, rec.twin_completions, rec.cost, a, a0)
        except UndefinedMetricError:
            froi = float("nan")
        rows.append({"episode": rec.episode, "rlr": rlr, "cre": cre, "froi": froi})
    return rows


def run_baseline(
    kind: BaselineKind,
    prep: ScenePrep,
    seed: int,
    policy: GaussianPolicy | None = None,
    policy_path: Path | None = None,
    collect_tracker_rows: bool = False,
) -> CellResult:
    """Evaluate one method on one seeded test episode."""
    if kind is BaselineKind.OPT:
        return _run_opt_cell(prep, seed)
    if kind in (BaselineKind.PDM_A, BaselineKind.PDM_S):
        return _run_pdm_cell(kind, prep, seed)
    if policy is None:
        if policy_path is None or not Path(policy_path).exists():
            raise ConfigError(
                f"{kind.value} needs a trained policy checkpoint (missing: {policy_path})"
            )
        policy = GaussianPolicy.load(policy_path)
    return _run_rl_cell(kind, prep, seed, policy, collect_tracker_rows)


# -- report assembly ----------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return "na"
    if isinstance(x, float):
        return format(x, ".10g")
    return str(x)


def write_report_csv(results: list[CellResult], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "scene", "seed", "CRE", "direction", "FROI", "RLR"])
        for r in sorted(results, key=lambda r: (r.scene, r.method, r.seed)):
            writer.writerow(
                [r.method, r.scene, r.seed, _fmt(r.cre), r.direction, _fmt(r.froi), _fmt(r.rlr)]
            )


def aggregate_results(results: list[CellResult]) -> list[dict]:
    """Mean/stddev per (scene, method) across seeds."""
    groups: dict[tuple[int, str], list[CellResult]] = {}
    for r in results:
        groups.setdefault((r.scene, r.method), []).append(r)
    rows = []
    for (scene, method), cells in sorted(groups.items()):
        cre = np.array([c.cre for c in cells])
        rlr = np.array([c.rlr for c in cells])
        froi = np.array([c.froi for c in cells if c.froi is not None])
        over = sum(1 for c in cells if c.direction == "over")
        rows.append(
            {
                "scene": scene,
                "method": method,
                "seeds": len(cells),
                "cre_mean": float(cre.mean()),
                "cre_std": float(cre.std()),
                "direction": "over" if over * 2 > len(cells) else "under",
                "froi_mean": float(froi.mean()) if froi.size else None,
                "froi_std": float(froi.std()) if froi.size else None,
                "rlr_mean": float(rlr.mean()),
                "rlr_std": float(rlr.std()),
            }
        )
    return rows


def write_summary_csv(rows: list[dict], path: Path) -> None:
    cols = [
        "scene", "method", "seeds", "cre_mean", "cre_std", "direction",
        "froi_mean", "froi_std", "rlr_mean", "rlr_std",
    ]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in cols])


def write_trace_csv(result: CellResult, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slot", "irr_mean", "lambda", "cost_rate", "completions"])
        for row in result.trace:
            writer.writerow(
                [
                    row["slot"],
                    _fmt(row["irr_mean"]),
                    _fmt(row["lambda"]),
                    _fmt(row["cost_rate"]),
                    _fmt(row["completions"]),
                ]
            )


def _evaluate_cell(args) -> CellResult:
    prep, kind_value, seed, policy = args
    return run_baseline(BaselineKind(kind_value), prep, seed, policy=policy)


def run_experiment(
    scenes: list[int],
    kinds: list[BaselineKind],
    seeds: list[int],
    out_dir: Path,
    strategy: StrategyConfig | None = None,
    scenario_overrides: dict | None = None,
    jobs: int = 1,
    figures: bool = True,
    preps: dict[int, ScenePrep] | None = None,
) -> tuple[list[CellResult], list[dict]]:
    """Full cross product of cells; writes report, summary, traces and figures."""
    strategy = strategy or StrategyConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    preps = dict(preps or {})
    for scene in scenes:
        if scene not in preps:
            preps[scene] = prepare_scene(scene, strategy, scenario_overrides)

    # train any needed policies up front (sequential: exclusive writer)
    policies: dict[tuple[int, str, int], GaussianPolicy] = {}
    for scene in scenes:
        for kind in kinds:
            if kind not in RL_KINDS:
                continue
            for seed in seeds:
                ckpt_dir = out_dir / "checkpoints" / f"scene{scene}" / f"{kind.value}_seed{seed}"
                final = ckpt_dir / "policy_final.ckpt"
                if final.exists():
                    policies[(scene, kind.value, seed)] = GaussianPolicy.load(final)
                    continue
                policy, history = train_rl_policy(
                    preps[scene], seed, use_fca=kind is BaselineKind.FCA_RL,
                    checkpoint_dir=ckpt_dir,
                )
                curve_path = ckpt_dir / "training_curve.csv"
                write_training_curve_csv(training_curve_rows(preps[scene], history), curve_path)
                policies[(scene, kind.value, seed)] = policy

    cells = [
        (preps[scene], kind.value, seed, policies.get((scene, kind.value, seed)))
        for scene in scenes
        for kind in kinds
        for seed in seeds
    ]
    results: list[CellResult] = []
    errors: list[tuple] = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for cell, outcome in zip(cells, pool.map(_evaluate_cell, cells)):
                results.append(outcome)
    else:
        for cell in cells:
            try:
                results.append(_evaluate_cell(cell))
            except Exception as exc:  # record the failed cell, keep running
                errors.append((cell[0].scene, cell[1], cell[2], repr(exc)))

    write_report_csv(results, out_dir / "report.csv")
    summary = aggregate_results(results)
    write_summary_csv(summary, out_dir / "summary.csv")
    for r in results:
        write_trace_csv(r, out_dir / f"trace_{r.scene}_{r.method}_{r.seed}.csv")
    if errors:
        with open(out_dir / "errors.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["scene", "method", "seed", "error"])
            writer.writerows(errors)
    if figures:
        from . import figures as fig

        for r in results:
            fig.render_trace(r.trace, out_dir / f"trace_{r.scene}_{r.method}_{r.seed}.png",
                             title=f"scene {r.scene} / {r.method} / seed {r.seed}")
        if summary:
            fig.render_summary(summary, out_dir / "summary.png")
    return results, summary


def write_training_curve_csv(rows: list[dict], path: Path) -> None:
    exists = Path(path).exists()
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if not exists:
            writer.writerow(["episode", "RLR", "CRE", "FROI"])
        for row in rows:
            writer.writerow([row["episode"], _fmt(row["rlr"]), _fmt(row["cre"]), _fmt(row["froi"])])
