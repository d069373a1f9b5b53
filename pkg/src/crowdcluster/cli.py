"""Single-binary orchestrator for the pipeline and desk-scale experiments.

Every command is a pure function of its declared inputs plus seed, and every
output gets a manifest written beside it with enough to reproduce the run.
Exit codes: 0 success, 1 validation/domain error, 2 internal error, 64 usage.
"""

from __future__ import annotations

import csv
import io
import json
import sys
from pathlib import Path

import click

from . import __version__, serialize
from .aggregation import AggregationConfig, extract_clusters, fit
from .core import expand_responses
from .errors import CrowdClusterError, ValidationError
from .evaluation import generate_intruder_tasks, report_text, score_intruder
from .sampler import build_plan
from .simulation import SimWorker, make_world, run_pipeline
from .store import DEFAULT_LEASE_SECONDS, StoreRegistry


def _write_manifest(out_path: Path, command: str, parameters: dict,
                    seed: int | None, inputs: list[str], outputs: list[str]) -> None:
    manifest = {
        "command": command,
        "parameters": parameters,
        "seed": seed,
        "inputs": sorted(inputs),
        "outputs": sorted(outputs),
        "version": __version__,
    }
    Path(str(out_path) + ".manifest.json").write_text(serialize.dumps_pretty(manifest))


def _load_json(path: str):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ValidationError(f"input file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path} is not valid JSON: {exc}") from exc


def _load_jsonl(path: str) -> list[dict]:
    try:
        text = Path(path).read_text()
    except FileNotFoundError as exc:
        raise ValidationError(f"input file not found: {path}") from exc
    try:
        return serialize.read_jsonl(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path} is not valid JSON Lines: {exc}") from exc


@click.group()
@click.version_option(version=__version__)
def cli() -> None:
    """Crowd-powered object clustering: plan, collect, aggregate, evaluate."""


@cli.command("plan")
@click.option("--objects", "objects_path", required=True, help="JSON list of object records.")
@click.option("--m", "--page-size", "page_size", default=6, show_default=True)
@click.option("--v", "--occurrences", "occurrences", default=None, type=int,
              help="Occurrences per object; defaults to the log-budget formula.")
@click.option("--r", "--replication", "replication", default=3, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--allow-any-page-size", is_flag=True,
              help="Lift the 3..8 page-size policy.")
@click.option("--out", "out_path", default="plan.json", show_default=True)
def plan_cmd(objects_path, page_size, occurrences, replication, seed,
             allow_any_page_size, out_path):
    """Build a sampling plan covering each object on the logarithmic budget."""
    objects = [serialize.object_record_from_doc(d) for d in _load_json(objects_path)]
    plan = build_plan(objects, page_size=page_size, occurrences=occurrences,
                      replication=replication, seed=seed,
                      size_policy=None if allow_any_page_size else (3, 8))
    out = Path(out_path)
    out.write_text(serialize.dumps_pretty(serialize.plan_to_doc(plan)))
    _write_manifest(out, "plan",
                    {"page_size": page_size, "occurrences": plan.occurrences,
                     "replication": replication},
                    seed, [objects_path], [str(out)])
    click.echo(f"{plan.page_count} pages of {plan.page_size} "
               f"({plan.occurrences} occurrences per object) -> {out}")


@cli.command("serve")
@click.option("--data-dir", required=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8321, show_default=True)
@click.option("--lease-minutes", default=DEFAULT_LEASE_SECONDS // 60, show_default=True)
@click.option("--images-dir", default=None, help="Directory of static object images.")
def serve_cmd(data_dir, host, port, lease_minutes, images_dir):
    """Run the coordination service."""
    import uvicorn

    from .service import create_app

    app = create_app(data_dir, images_dir=images_dir, lease_seconds=lease_minutes * 60)
    click.echo(f"serving on http://{host}:{port} (data in {data_dir})")
    uvicorn.run(app, host=host, port=port, log_level="warning")


def _expand_workers(entries: list[dict], default_seed: int) -> list[SimWorker]:
    workers = []
    for entry in entries:
        count = int(entry.get("count", 0))
        if count:
            kind = entry.get("kind", "faithful")
            base_seed = int(entry.get("seed", default_seed))
            for i in range(count):
                workers.append(SimWorker(
                    worker_id=f"{kind}-{len(workers):03d}", kind=kind,
                    p_flip=float(entry.get("p_flip", 0.0)), seed=base_seed + i,
                ))
        else:
            workers.append(serialize.sim_worker_from_doc(entry))
    return workers


def _run_scenario(scenario: dict) -> dict:
    world_cfg = scenario.get("world") or {}
    world = make_world(
        n_objects=int(world_cfg.get("n_objects", 60)),
        true_clusters=int(world_cfg.get("true_clusters", 4)),
        attribute_count=int(world_cfg.get("attribute_count", 1)),
        seed=int(world_cfg.get("seed", 0)),
    )
    workers = _expand_workers(scenario.get("workers") or [{"kind": "faithful", "count": 6}],
                              default_seed=world.seed)
    eval_cfg = scenario.get("evaluation") or {}
    evaluators = (_expand_workers(eval_cfg["evaluators"], default_seed=world.seed + 5000)
                  if eval_cfg.get("evaluators") else None)
    config = serialize.aggregation_config_from_doc(scenario.get("aggregation") or {})
    metrics = run_pipeline(
        world, workers,
        page_size=int(scenario.get("page_size", 6)),
        replication=int(scenario.get("replication", 3)),
        config=config,
        evaluators=evaluators,
        evaluation_group_size=int(eval_cfg.get("group_size", 6)),
        tasks_per_cluster=int(eval_cfg.get("tasks_per_cluster", 3)),
        occurrences=scenario.get("occurrences"),
    )
    world_summary = {"n_objects": world.n_objects, "true_clusters": world.true_clusters,
                     "attribute_count": world.attribute_count, "seed": world.seed}
    return {"world": world_summary, **metrics.as_record()}


def _merge_scenario(base: dict, override: dict) -> dict:
    merged = dict(base)
    merged.pop("runs", None)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = {**merged[key], **value}
        else:
            merged[key] = value
    return merged


@cli.command("simulate")
@click.option("--scenario", "scenario_path", required=True,
              help="JSON scenario: world + worker mix + parameters (+ optional runs).")
@click.option("--out", "out_path", default="metrics.json", show_default=True)
def simulate_cmd(scenario_path, out_path):
    """Run synthetic-crowd pipelines and emit metrics (JSON + CSV row per run)."""
    scenario = _load_json(scenario_path)
    runs = scenario.get("runs") or [{}]
    records = [_run_scenario(_merge_scenario(scenario, override)) for override in runs]

    out = Path(out_path)
    doc = records[0] if len(records) == 1 else records
    out.write_text(serialize.dumps_pretty(doc))

    csv_path = out.with_suffix(".csv")
    fields = ["run", "ari", "cluster_count", "intruder_quality", "pair_count",
              "sweep_count", "page_count"]
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for i, record in enumerate(records):
        writer.writerow({"run": i, **{f: record[f] for f in fields[1:]}})
    csv_path.write_text(buffer.getvalue())

    _write_manifest(out, "simulate", {"runs": len(records)},
                    (scenario.get("world") or {}).get("seed"),
                    [scenario_path], [str(out), str(csv_path)])
    for i, record in enumerate(records):
        click.echo(f"run {i}: ari={record['ari']:.4f} clusters={record['cluster_count']} "
                   f"quality={record['intruder_quality']:.4f} pairs={record['pair_count']}")


@cli.command("aggregate")
@click.option("--responses", "responses_path", required=True,
              help="JSON Lines of grouping responses.")
@click.option("--plan", "plan_path", default=None,
              help="Optional plan.json to validate responses against.")
@click.option("--config", "config_path", default=None,
              help="Optional aggregation config JSON.")
@click.option("--seed", default=None, type=int, help="Overrides the config seed.")
@click.option("--out", "out_path", default="result.json", show_default=True)
def aggregate_cmd(responses_path, plan_path, config_path, seed, out_path):
    """Recover clusters from collected grouping responses."""
    response_docs = _load_jsonl(responses_path)
    responses = [serialize.grouping_response_from_doc(d) for d in response_docs]
    if not responses:
        raise ValidationError(f"{responses_path} contains no responses")

    pages_by_id = None
    object_ids: list[str]
    if plan_path:
        plan = serialize.plan_from_doc(_load_json(plan_path))
        pages_by_id = {p.page_id: p for p in plan.pages}
        object_ids = sorted({o for p in plan.pages for o in p.object_ids})
    else:
        object_ids = sorted({o for r in responses for o in r.groups})
    pairs = expand_responses(responses, pages_by_id)
    worker_ids = sorted({r.worker_id for r in responses})

    cfg_doc = _load_json(config_path) if config_path else {}
    if seed is not None:
        cfg_doc["seed"] = seed
    config = serialize.aggregation_config_from_doc(cfg_doc)

    diagnostics: list[dict] = []
    state = fit(pairs, object_ids, worker_ids, config, diagnostics=diagnostics.append)
    result = extract_clusters(state)

    out = Path(out_path)
    out.write_text(serialize.dumps_pretty(serialize.clustering_result_to_doc(result)))
    diag_path = out.with_suffix(".diagnostics.jsonl")
    diag_path.write_text(serialize.write_jsonl(diagnostics))
    _write_manifest(out, "aggregate",
                    {"config": serialize.aggregation_config_to_doc(config),
                     "pairs": len(pairs)},
                    config.seed,
                    [responses_path] + ([plan_path] if plan_path else [])
                    + ([config_path] if config_path else []),
                    [str(out), str(diag_path)])
    click.echo(f"{result.cluster_count} clusters over {len(object_ids)} objects "
               f"(objective {state.objective:.4f}) -> {out}")


@cli.command("evaluate")
@click.option("--result", "result_path", required=True)
@click.option("--responses", "responses_path", required=True,
              help="JSON Lines of intruder responses.")
@click.option("--tasks", "tasks_path", default=None,
              help="Intruder tasks JSON; regenerated from the result when omitted.")
@click.option("--group-size", default=6, show_default=True)
@click.option("--tasks-per-cluster", default=3, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", default="report.json", show_default=True)
def evaluate_cmd(result_path, responses_path, tasks_path, group_size,
                 tasks_per_cluster, seed, out_path):
    """Score intruder responses into an evaluation report (JSON, text, figure)."""
    result = serialize.clustering_result_from_doc(_load_json(result_path))
    if tasks_path:
        tasks = [serialize.intruder_task_from_doc(d) for d in _load_json(tasks_path)]
    else:
        tasks = generate_intruder_tasks(result, group_size=group_size,
                                        tasks_per_cluster=tasks_per_cluster, seed=seed)
    responses = [serialize.intruder_response_from_doc(d) for d in _load_jsonl(responses_path)]
    report = score_intruder(tasks, responses)

    out = Path(out_path)
    out.write_text(serialize.dumps_pretty(serialize.report_to_doc(report)))
    text_path = out.with_suffix(".txt")
    text_path.write_text(report_text(report))
    from .figures import render_quality_bars
    figure_path = out.with_suffix(".png")
    render_quality_bars(report, figure_path)
    _write_manifest(out, "evaluate",
                    {"group_size": group_size, "tasks_per_cluster": tasks_per_cluster},
                    seed,
                    [result_path, responses_path] + ([tasks_path] if tasks_path else []),
                    [str(out), str(text_path), str(figure_path)])
    click.echo(report_text(report))


@cli.command("viz")
@click.option("--result", "result_path", required=True)
@click.option("--out", "out_path", default="viz.csv", show_default=True)
def viz_cmd(result_path, out_path):
    """Write the 2-D projection as CSV plus a rendered scatter figure."""
    result = serialize.clustering_result_from_doc(_load_json(result_path))
    out = Path(out_path)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["object_id", "x", "y", "cluster"])
    for obj in sorted(result.projection):
        x, y = result.projection[obj]
        writer.writerow([obj, repr(x), repr(y), result.assignment.assignment[obj]])
    out.write_text(buffer.getvalue())
    from .figures import render_cluster_scatter
    figure_path = out.with_suffix(".png")
    render_cluster_scatter(result, figure_path)
    _write_manifest(out, "viz", {}, None, [result_path], [str(out), str(figure_path)])
    click.echo(f"{len(result.projection)} points, {result.cluster_count} clusters "
               f"-> {out}, {figure_path}")


@cli.command("export")
@click.option("--data-dir", required=True)
@click.option("--project", "project_id", required=True)
@click.option("--out", "out_path", default="export.jsonl", show_default=True)
def export_cmd(data_dir, project_id, out_path):
    """Dump a project (document + full event log) as platform-neutral JSON Lines."""
    registry = StoreRegistry(Path(data_dir))
    lines = registry.get(project_id).export_lines()
    out = Path(out_path)
    out.write_text("\n".join(lines) + "\n")
    _write_manifest(out, "export", {"project": project_id}, None,
                    [str(Path(data_dir) / "projects" / project_id)], [str(out)])
    click.echo(f"{len(lines)} lines -> {out}")


@cli.command("import")
@click.option("--data-dir", required=True)
@click.option("--file", "file_path", required=True, help="An export.jsonl stream.")
def import_cmd(data_dir, file_path):
    """Materialize a project from an export stream (replayed on load)."""
    try:
        lines = Path(file_path).read_text().splitlines()
    except FileNotFoundError as exc:
        raise ValidationError(f"input file not found: {file_path}") from exc
    registry = StoreRegistry(Path(data_dir))
    store = registry.import_lines(lines)
    click.echo(f"imported project {store.project_id!r} "
               f"({store.seq} events, state {store.state!r})")


def main(argv: list[str] | None = None) -> int:
    """Entry point with the documented exit-code contract."""
    try:
        cli.main(args=argv, prog_name="crowdcluster", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.UsageError as exc:
        exc.show()
        return 64
    except click.ClickException as exc:
        exc.show()
        return 1
    except CrowdClusterError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        click.echo(f"internal error: {type(exc).__name__}: {exc}", err=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
