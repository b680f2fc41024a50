"""``trendmap`` command line: ingest, train, analyze, simulate.

Exit codes: 0 success, 2 usage error, 3 missing or malformed input,
4 computation failure.
"""

from __future__ import annotations

import argparse
import logging
import re
import sys
from pathlib import Path

import numpy as np

from . import analysis, gmm, ingest, matrix, render, som
from .config import ConfigError, PipelineConfig, dump_config, load_config, parse_overrides
from .textio import write_array

logger = logging.getLogger("trendmap")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_COMPUTE = 4

ASPECTS = ("domain", "location", "multi")
FULL_COVARIANCE_MAX_DIM = 200


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class ComputeError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _require(path: Path | None, what: str) -> Path:
    if path is None:
        raise InputError(f"no {what} path configured")
    if not path.is_file():
        raise InputError(f"{what} file not found: {path}")
    return path


def _flow_format(cfg: PipelineConfig) -> ingest.FlowFormat:
    delim = cfg.flow_delimiter
    if delim is not None:
        delim = {"tab": "\t", "comma": ",", "pipe": "|", "auto": None, "whitespace": None}.get(delim.lower(), delim)
    return ingest.FlowFormat(delim, cfg.flow_header, cfg.base_year)


def _safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._@-]+", "_", name) or "_"


def _write_grid(path: Path, values: np.ndarray, kind: str) -> None:
    with open(path, "w") as fh:
        write_array(fh, values, meta={"kind": kind})


def _read_usage(cfg: PipelineConfig) -> list[ingest.UsageRecord]:
    path = _require(cfg.usage_path, "usage-record")
    with open(path) as fh:
        return ingest.read_usage(fh)


def _load_model(path: str | None) -> som.SomModel:
    if not path:
        raise UsageError("--model is required")
    p = Path(path)
    if not p.is_file():
        raise InputError(f"model file not found: {p}")
    with open(p) as fh:
        return som.load_model(fh)


def _training_data(cfg: PipelineConfig, records, aspect: str):
    if aspect == "domain":
        raw = matrix.build_matrix(records, "domain", top=cfg.top_domains)
    elif aspect == "location":
        raw = matrix.build_matrix(records, "building", top=cfg.top_buildings)
    else:
        raw = matrix.build_tensor(records, cfg.tensor_domains, cfg.tensor_buildings)
    return raw


def _normalize(cfg_or_norm, raw):
    if isinstance(cfg_or_norm, matrix.Normalization):
        log, row = cfg_or_norm.log_applied, cfg_or_norm.row_norm
    else:
        log = cfg_or_norm.log_transform
        row = None if cfg_or_norm.row_norm == "none" else cfg_or_norm.row_norm
    return matrix.normalize(matrix.drop_empty_users(raw), log_applied=log, row_norm=row)


def _latest_period(records) -> str:
    return max(r.period for r in records)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_ingest(cfg: PipelineConfig, out: Path | None = None) -> ingest.IngestReport:
    """Parse and join the three traces; write ``usage.csv`` and ``ingest_report.txt``."""
    flows_p = _require(cfg.resolve(cfg.flows), "flow")
    dhcp_p = _require(cfg.resolve(cfg.dhcp), "DHCP")
    sess_p = _require(cfg.resolve(cfg.sessions), "session")
    dmap_p = _require(cfg.resolve(cfg.domain_map), "domain-map")
    out = out or cfg.out_dir
    with open(flows_p) as fh:
        flows = ingest.parse_flows(fh, _flow_format(cfg))
    with open(dhcp_p) as fh:
        leases = ingest.parse_dhcp(fh, base_year=cfg.base_year)
    with open(sess_p) as fh:
        sessions = ingest.parse_sessions(fh, base_year=cfg.base_year)
    with open(dmap_p) as fh:
        dmap = ingest.parse_domain_map(fh)
    if not flows.records:
        logger.warning("flow file %s contains no flows", flows_p)
    result = ingest.aggregate_usage(flows.records, leases.records, sessions.records, dmap,
                                    ingest.AggregateConfig(cfg.prefix_threshold, cfg.top_domains))
    result.report.flows_skipped = flows.skipped
    out.mkdir(parents=True, exist_ok=True)
    usage_path = Path(cfg.resolve(cfg.usage)) if cfg.usage else out / "usage.csv"
    with open(usage_path, "w") as fh:
        ingest.write_usage(result.records, fh)
    report = result.report
    with open(out / "ingest_report.txt", "w") as fh:
        fh.write(report.to_text())
        fh.write(f"dhcp_skipped = {leases.skipped}\nsessions_skipped = {sessions.skipped}\n")
    logger.info("ingest: %d flows -> %d usage records (conserved=%s)",
                report.flows_total, report.records_out, report.conserved)
    return report


def cmd_train(cfg: PipelineConfig, aspect: str, out: Path | None = None) -> Path:
    """Build, normalise and train; writes ``model-<aspect>.som``."""
    if aspect not in ASPECTS:
        raise UsageError(f"--aspect must be one of {ASPECTS}")
    records = _read_usage(cfg)
    if not records:
        raise ComputeError("usage file is empty: nothing to model")
    try:
        data = _normalize(cfg, _training_data(cfg, records, aspect))
    except ValueError as exc:
        raise ComputeError(str(exc)) from exc
    if len(data.users) == 0:
        raise ComputeError("every user has zero usage on the selected features")
    grid = som.map_dimensions(data, cfg.units, cfg.topology)
    schedule = som.TrainingSchedule.default(grid, len(data.users), cfg.epochs, cfg.seed,
                                            **cfg.schedule_overrides())
    logger.info("train %s: %d users, sample shape %s, grid %dx%d, %d presentations",
                aspect, len(data.users), data.sample_shape, grid.rows, grid.cols, schedule.iterations)
    model = som.train(data, grid, schedule, cfg.init)
    model = som.with_meta(model, aspect=aspect, users=len(data.users), period=_latest_period(records))
    out = out or cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"model-{aspect}.som"
    with open(path, "w") as fh:
        som.save_model(model, fh)
    return path


def cmd_analyze(cfg: PipelineConfig, model_path: str, out: Path | None = None,
                features: list[str] | None = None) -> Path:
    """U-matrix, trend clusters, feature maps, feature clusters and the clustered heatmap."""
    model = _load_model(model_path)
    aspect = model.meta.get("aspect", "model")
    out = out or cfg.out_dir / f"analysis-{aspect}"
    names = analysis.feature_names(model)
    wanted = names if not features else features
    vectors = [analysis.extract_feature_vector(model, f) for f in wanted]  # validates names first
    out.mkdir(parents=True, exist_ok=True)
    grid = model.grid
    cell = cfg.cell_pixels

    umat = analysis.compute_umatrix(model)
    _write_grid(out / "umatrix.txt", umat, "umatrix")
    render.save_png(render.grid_image(umat, cell, grid.topology, interpolate=cfg.interpolate), out / "umatrix.png")

    k = min(cfg.k_trends, grid.n_nodes)
    trends = analysis.cluster_trends(model, k, cfg.restarts, cfg.seed)
    with open(out / "trend_clusters.csv", "w") as fh:
        analysis.write_node_clusters(fh, trends)
    _write_grid(out / "trend_clusters.txt", trends.as_grid().astype(float), "trend_clusters")
    render.save_png(render.label_image(trends.as_grid(), cell, grid.topology), out / "trend_clusters.png")

    fm_dir = out / "feature_maps"
    fm_dir.mkdir(exist_ok=True)
    for v in vectors:
        fmap = v.values.reshape(grid.rows, grid.cols)
        stem = _safe_name(v.feature)
        _write_grid(fm_dir / f"{stem}.txt", fmap, "feature_map")
        render.save_png(render.grid_image(fmap, cell, grid.topology, interpolate=cfg.interpolate),
                        fm_dir / f"{stem}.png")

    all_vectors = analysis.feature_vectors(model) if features else vectors
    if len(all_vectors) >= 2:
        kf = min(cfg.k_features, len(all_vectors))
        fc = analysis.cluster_features(all_vectors, cfg.linkage, kf)
        with open(out / "feature_clusters.csv", "w") as fh:
            analysis.write_feature_clusters(fh, fc.assignment)
        with open(out / "feature_cluster_table.txt", "w") as fh:
            analysis.write_cluster_table(fh, fc)
        perm, D = analysis.heatmap_order(all_vectors, fc.dendrogram)
        ordered = [all_vectors[i].feature for i in perm]
        with open(out / "heatmap.txt", "w") as fh:
            write_array(fh, D, [ordered, ordered], {"kind": "correlation_distance"})
        sizes = []
        for name in ordered:
            cid = fc.assignment[name]
            if sizes and sizes[-1][0] == cid:
                sizes[-1][1] += 1
            else:
                sizes.append([cid, 1])
        render.save_png(render.heatmap_image(D, [s for _, s in sizes]), out / "heatmap.png")
    else:
        logger.warning("fewer than two features: feature clustering skipped")
    return out


def cmd_simulate(cfg: PipelineConfig, model_path: str, n: int, out: Path | None = None) -> Path:
    """Fit the SOM-seeded GMM and write synthetic usage (normalised and in minutes)."""
    if n is None or n < 1:
        raise UsageError("-n must be a positive integer")
    model = _load_model(model_path)
    aspect = model.meta.get("aspect", "domain")
    records = _read_usage(cfg)
    if not records:
        raise ComputeError("usage file is empty: nothing to estimate from")
    raw = matrix.matrix_for_labels(records, aspect, model.feature_labels)
    data = _normalize(model.normalization, raw)
    cov = cfg.gmm_covariance
    if cov == "auto":
        cov = "full" if data.flat().shape[1] <= FULL_COVARIANCE_MAX_DIM else "diag"
    try:
        mix = gmm.estimate(model, data, cfg.r_est, cfg.gmm_min_weight, cov)
    except gmm.EstimationError as exc:
        raise ComputeError(str(exc)) from exc
    out = out or cfg.out_dir / f"simulation-{aspect}"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "gmm.txt", "w") as fh:
        gmm.save_gmm(mix, fh)
    alpha = mix.alpha_grid()
    _write_grid(out / "alpha.txt", alpha, "alpha")
    render.save_png(render.grid_image(alpha, cfg.cell_pixels, model.grid.topology), out / "alpha.png")

    samples = gmm.sample(mix, n, cfg.seed)
    users = [f"sim{i:06d}" for i in range(n)]
    labels = analysis.feature_names(model)
    with open(out / "samples_normalized.txt", "w") as fh:
        write_array(fh, samples, [users, labels], {"kind": "samples"})
    minutes = gmm.denormalize(samples, data.normalization, data.row_scales, cfg.seed)
    period = model.meta.get("period") or _latest_period(records)
    synth = []
    for u, row in zip(users, minutes):
        for label, value in zip(model.feature_labels, row):
            if value <= 0:
                continue
            if aspect == "multi":
                dom, bld = label
            elif aspect == "location":
                dom, bld = ingest.UNKNOWN_BUILDING, label
            else:
                dom, bld = label, ingest.UNKNOWN_BUILDING
            synth.append(ingest.UsageRecord(u, dom, bld, period, float(value)))
    with open(out / "synthetic_usage.csv", "w") as fh:
        ingest.write_usage(synth, fh)
    logger.info("simulate: %d components, %d samples, %d synthetic records", len(mix.components), n, len(synth))
    return out


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                        help="override any config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="trendmap", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[common], help="join traces into usage records")
    t = sub.add_parser("train", parents=[common], help="train a SOM on usage records")
    t.add_argument("--aspect", choices=ASPECTS, default="domain")
    a = sub.add_parser("analyze", parents=[common], help="U-matrix, clusters and feature maps")
    a.add_argument("--model", required=True)
    a.add_argument("--feature", action="append", help="only render these feature maps (repeatable)")
    s = sub.add_parser("simulate", parents=[common], help="fit the GMM and sample synthetic usage")
    s.add_argument("--model", required=True)
    s.add_argument("-n", type=int, required=True, help="number of synthetic users")
    s.add_argument("--aspect", choices=ASPECTS, help=argparse.SUPPRESS)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        overrides = parse_overrides(args.set)
        if args.seed is not None:
            overrides["seed"] = args.seed
        cfg = load_config(args.config, **overrides)
        out = Path(args.out).resolve() if args.out else None
        if args.command == "ingest":
            cmd_ingest(cfg, out)
        elif args.command == "train":
            cmd_train(cfg, args.aspect, out)
        elif args.command == "analyze":
            cmd_analyze(cfg, args.model, out, args.feature)
        else:
            cmd_simulate(cfg, args.model, args.n, out)
    except (UsageError, ConfigError, analysis.UnknownFeatureError) as exc:
        print(f"trendmap: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, ingest.TraceFormatError, som.ModelFormatError, FileNotFoundError) as exc:
        print(f"trendmap: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ComputeError, gmm.EstimationError, ValueError, ArithmeticError) as exc:
        print(f"trendmap: computation error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
