"""Command-line entry point: one subcommand per pipeline stage.

Every stage reads its inputs from the run directory, writes its artifacts
atomically and leaves a `<command>.manifest.json` carrying the config hash
and seed. Exit codes: 0 ok, 1 domain error, 2 usage or configuration error.
"""

import argparse
import logging
import os
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd

from . import set_log_level
from .adversarial import (
    ScenarioRecord,
    SurrogateTrafficEnv,
    generate_scenarios,
    group_scenario_lines,
    train_adversarial,
)
from .analysis import cluster_label_report, metrics_report, write_analysis
from .artifacts import (
    Manifest,
    atomic_write,
    check_config_hashes,
    load_manifest,
    manifest_path,
    read_json,
    read_jsonl,
    read_parquet,
    require,
    write_csv,
    write_json,
    write_jsonl,
    write_manifest,
    write_parquet,
)
from .calibration import calibrate_idm, calibrate_mobil
from .config import RunConfig, config_hash, dump_config, load_config
from .conversion import to_arrow
from .driver_models import IdmParameters, MobilParameters
from .errors import AdvScenarioError, CalibrationError, CheckpointError, ConfigError
from .experiments import naturalness_ablation
from .gail import ReplayTrafficEnv, collect_expert_trajectories, save_prior, train_gail
from .ingest import Episode, Schema, TrajectoryIndex, infer_lane_and_leader, load_trajectories, serialize_trajectories
from .neural import GaussianPolicy, load_checkpoint
from .ppo import PpoAgent
from .preprocess import (
    CarFollowingSegment,
    LaneChangeContext,
    LaneChangeEvent,
    extract_lane_change_events,
    preprocess_corpus,
    screening_report_csv,
)
from .roads import RoadNetwork
from .synthetic import generate_corpus
from .traffic import SurrogateDriver

logger = logging.getLogger(__name__)

LOG_LEVEL_ENV = "ADVSCENARIO_LOG_LEVEL"
EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2

TRAJECTORIES = "trajectories.csv"
ROAD_SPEC = "road.json"
CAR_FOLLOWING = "car_following.parquet"
SCREENING_REPORT = "screening_report.csv"
LANE_CHANGES = "lane_changes.jsonl"
IDM_CALIBRATION = "idm_calibration.json"
GA_CURVE = "ga_curve.csv"
MOBIL_CALIBRATION = "mobil_calibration.json"
EXPERT_BUFFER = "expert.parquet"
GAIL_CHECKPOINT = "gail_prior.json"
GAIL_CURVES = "gail_curves.csv"
ADV_CHECKPOINT = "adversarial_policy.json"
ADV_CURVES = "adv_curves.csv"
SCENARIOS = "scenarios.jsonl"
ANALYSIS_DIR = "analysis"
ABLATION_DIR = "ablation"


@dataclass
class Stage:
    """Resolved configuration plus the run directory a command works in."""

    config: RunConfig
    force: bool = False

    @property
    def out(self) -> Path:
        return self.config.out

    @property
    def hash(self) -> str:
        return config_hash(self.config)

    @property
    def seed(self) -> int:
        return self.config.seed

    def path(self, name: str) -> Path:
        return self.out / name

    def finish(self, command: str, files: Sequence[Path], extra: Optional[dict] = None) -> Manifest:
        return write_manifest(self.out, command, self.hash, self.seed, files, extra)


def _road(stage: Stage) -> RoadNetwork:
    return stage.config.road_network()


def _episodes(stage: Stage, road: RoadNetwork) -> List[Episode]:
    dataset = stage.config.dataset
    if dataset.paths:
        episodes = [e for p in dataset.paths for e in load_trajectories(p, dataset.schema)]
    else:
        episodes = load_trajectories(require(stage.path(TRAJECTORIES), "synth-data"), Schema.CANONICAL)
    if Schema(dataset.schema) is Schema.INTERACTION:
        episodes = infer_lane_and_leader(episodes, road)
    logger.info("Loaded %d trajectory episode(s)", len(episodes))
    return episodes


def cmd_synth_data(stage: Stage) -> Manifest:
    road = _road(stage)
    synth = replace(stage.config.synth, seed=stage.config.synth.seed + stage.seed)
    episodes = generate_corpus(synth, road)
    files = [
        atomic_write(stage.path(TRAJECTORIES), serialize_trajectories(episodes)),
        write_json(stage.path(ROAD_SPEC), road.to_spec()),
    ]
    return stage.finish("synth-data", files, {"episodes": len(episodes)})


def _event_row(event: LaneChangeEvent) -> dict:
    return asdict(event)


def _event_from_row(row: dict) -> LaneChangeEvent:
    return LaneChangeEvent(**{**row, "context": LaneChangeContext(**row["context"])})


def cmd_preprocess(stage: Stage) -> Manifest:
    road = _road(stage)
    episodes = _episodes(stage, road)
    screening = stage.config.screening
    result = preprocess_corpus(episodes, screening.build(), road, screening.sema_width_s)
    index = TrajectoryIndex(episodes)
    events = [ev for e in sorted(episodes, key=lambda e: e.ego_id)
              for ev in extract_lane_change_events(e, index, road)]
    files = [
        write_parquet(stage.path(CAR_FOLLOWING), to_arrow([s.to_row() for s in result.segments])),
        atomic_write(stage.path(SCREENING_REPORT), screening_report_csv(result.report)),
        write_jsonl(stage.path(LANE_CHANGES), [_event_row(ev) for ev in events]),
    ]
    return stage.finish("preprocess", files, {
        "extracted": result.extracted, "kept": result.kept, "lane_changes": len(events),
    })


def cmd_calibrate_idm(stage: Stage) -> Manifest:
    table = read_parquet(stage.path(CAR_FOLLOWING), "preprocess")
    segments = [CarFollowingSegment.from_row(row) for row in table.to_pylist()]
    ga = replace(stage.config.ga, seed=stage.config.ga.seed + stage.seed)
    result = calibrate_idm(segments, ga)
    curve = pd.DataFrame({"generation": range(len(result.curve)), "best_objective": result.curve})
    files = [
        write_json(stage.path(IDM_CALIBRATION), {**result.to_dict(), "config_hash": stage.hash}),
        write_csv(stage.path(GA_CURVE), curve),
    ]
    return stage.finish("calibrate-idm", files, {"objective": result.objective})


def cmd_calibrate_mobil(stage: Stage) -> Manifest:
    events = [_event_from_row(r) for r in read_jsonl(stage.path(LANE_CHANGES), "preprocess")]
    politeness = stage.config.mobil.politeness
    try:
        body = calibrate_mobil(events, politeness).to_dict()
    except CalibrationError as e:
        logger.warning("%s Writing the default thresholds.", e)
        body = {"params": MobilParameters(politeness).to_dict(), "event_count": 0}
    files = [write_json(stage.path(MOBIL_CALIBRATION), {**body, "config_hash": stage.hash})]
    return stage.finish("calibrate-mobil", files, {"event_count": body["event_count"]})


def cmd_train_gail(stage: Stage) -> Manifest:
    road = _road(stage)
    episodes = _episodes(stage, road)
    rules = replace(stage.config.expert, seed=stage.config.expert.seed + stage.seed)
    expert = collect_expert_trajectories(episodes, road, rules)
    env = ReplayTrafficEnv(episodes, road)
    result = train_gail(env, expert, stage.config.training, seed=stage.seed)
    files = [
        expert.write(stage.path(EXPERT_BUFFER)),
        save_prior(stage.path(GAIL_CHECKPOINT), result, {"config_hash": stage.hash}),
        write_csv(stage.path(GAIL_CURVES), result.curves),
    ]
    return stage.finish("train-gail", files, {"expert_pairs": len(expert), "prior_episode": result.prior_episode})


def _prior(stage: Stage) -> GaussianPolicy:
    nets, _ = load_checkpoint(require(stage.path(GAIL_CHECKPOINT), "train-gail"))
    prior = nets.get("prior_actor")
    if not isinstance(prior, GaussianPolicy):
        raise CheckpointError(f"{stage.path(GAIL_CHECKPOINT)} holds no prior policy; re-run train-gail")
    return prior


def _driver(stage: Stage) -> SurrogateDriver:
    idm = read_json(stage.path(IDM_CALIBRATION), "calibrate-idm")["params"]
    mobil = read_json(stage.path(MOBIL_CALIBRATION), "calibrate-mobil")["params"]
    return SurrogateDriver(IdmParameters(**idm), MobilParameters(**mobil))


def _adversarial_env(stage: Stage) -> SurrogateTrafficEnv:
    prior = _prior(stage)
    return SurrogateTrafficEnv(stage.config.scene, _driver(stage), prior, stage.config.reward)


def cmd_train_adv(stage: Stage) -> Manifest:
    env = _adversarial_env(stage)
    result = train_adversarial(env, stage.config.training, seed=stage.seed)
    files = [
        result.agent.save(stage.path(ADV_CHECKPOINT), {"config_hash": stage.hash}),
        write_csv(stage.path(ADV_CURVES), result.curves),
    ]
    return stage.finish("train-adv", files)


def cmd_generate(stage: Stage) -> Manifest:
    agent = PpoAgent.load(require(stage.path(ADV_CHECKPOINT), "train-adv"), stage.config.training)
    env = _adversarial_env(stage)
    generation = stage.config.generation
    records = generate_scenarios(agent, env, generation.runs, seed=stage.seed, workers=generation.workers)
    lines = [line for record in records for line in record.to_lines()]
    files = [atomic_write(stage.path(SCENARIOS), "".join(line + "\n" for line in lines))]
    return stage.finish("generate", files, {"runs": [r.summary() for r in records]})


def cmd_analyze(stage: Stage) -> Manifest:
    upstream = [load_manifest(stage.out, "generate")]
    for command in ("train-adv", "train-gail"):
        if manifest_path(stage.out, command).exists():
            upstream.append(load_manifest(stage.out, command))
    check_config_hashes(upstream, force=stage.force)
    records: List[ScenarioRecord] = group_scenario_lines(read_jsonl(stage.path(SCENARIOS), "generate"))
    analysis = stage.config.analysis
    report = metrics_report(records)
    clusters = cluster_label_report(records, analysis.clusters, stage.seed, analysis.pca_components)
    weights = tuple(analysis.weights) if analysis.weights is not None else None
    files = write_analysis(stage.path(ANALYSIS_DIR), report, clusters, stage.hash, weights)
    logger.info("AV collision rate %.2f%%, mean R_nat %.4f over %d run(s)",
                100 * report.collision_rate_av, report.mean_r_nat, report.runs)
    return stage.finish("analyze", files, {"upstream_hash": upstream[0].config_hash})


def cmd_ablation(stage: Stage) -> Manifest:
    cfg = stage.config
    result = naturalness_ablation(
        _prior(stage), _driver(stage), cfg.training, cfg.scene, cfg.reward,
        episodes=cfg.training.max_episodes, eval_runs=cfg.generation.runs, seed=stage.seed,
        workers=cfg.generation.workers,
    )
    out = stage.path(ABLATION_DIR)
    files = [
        write_csv(out / "ablation.csv", result.table()),
        atomic_write(out / "summary.txt", result.summary() + "\n"),
    ]
    for balance, curves in sorted(result.curves.items()):
        files.append(write_csv(out / f"curves_balance_{balance:g}.csv", curves))
    return stage.finish("ablation", files, {"directional": result.directional()})


PIPELINE = ("synth-data", "preprocess", "calibrate-idm", "calibrate-mobil", "train-gail", "train-adv",
            "generate", "analyze")


def cmd_pipeline(stage: Stage) -> Manifest:
    manifest = None
    for name in PIPELINE:
        logger.info("Pipeline stage %s", name)
        manifest = COMMANDS[name][0](stage)
    return manifest


COMMANDS: Dict[str, tuple] = {
    "synth-data": (cmd_synth_data, "Generate a synthetic trajectory corpus"),
    "preprocess": (cmd_preprocess, "Extract and screen car-following segments and lane changes"),
    "calibrate-idm": (cmd_calibrate_idm, "Fit IDM parameters with the genetic algorithm"),
    "calibrate-mobil": (cmd_calibrate_mobil, "Derive MOBIL thresholds from lane changes"),
    "train-gail": (cmd_train_gail, "Collect expert pairs and train the GAIL prior"),
    "train-adv": (cmd_train_adv, "Train the adversarial agent against surrogate traffic"),
    "generate": (cmd_generate, "Generate seeded scenarios with the adversarial agent"),
    "analyze": (cmd_analyze, "Compute metrics and collision clusters for generated scenarios"),
    "pipeline": (cmd_pipeline, "Run every stage from synth-data to analyze"),
    "ablation": (cmd_ablation, "Compare agents trained with and without the naturalness reward"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advscenario", description="Natural adversarial driving scenario generation.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", type=Path, help="YAML run configuration")
        p.add_argument("--seed", type=int, help="Run seed (overrides the config)")
        p.add_argument("--out", type=Path, help="Run directory (overrides output_dir)")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="Set a config value by dotted path, e.g. training.max_episodes=10")
        p.add_argument("--force", action="store_true", help="Accept inputs produced under a different config")
    return parser


def _env_log_level() -> Optional[int]:
    raw = os.environ.get(LOG_LEVEL_ENV)
    if not raw:
        return None
    if raw.strip().lstrip("-").isdigit():
        return int(raw)
    level = logging.getLevelName(raw.strip().upper())
    return level if isinstance(level, int) else None


def main(argv: Optional[Sequence[str]] = None) -> int:
    level = _env_log_level()
    if level is not None:
        set_log_level(level)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    if args.seed is not None and args.seed < 0:
        logger.error("--seed must be a non-negative integer")
        return EXIT_USAGE

    try:
        config = load_config(args.config, args.override, args.seed, args.out)
    except ConfigError as e:
        logger.error("Invalid configuration: %s", e)
        return EXIT_USAGE
    stage = Stage(config, args.force)
    try:
        stage.out.mkdir(parents=True, exist_ok=True)
        atomic_write(stage.path("config.yaml"), dump_config(config))
        COMMANDS[args.command][0](stage)
    except ConfigError as e:
        logger.error("%s", e)
        return EXIT_USAGE
    except AdvScenarioError as e:
        logger.error("%s", e)
        return EXIT_DOMAIN
    return EXIT_OK


def run() -> None:
    sys.exit(main())
