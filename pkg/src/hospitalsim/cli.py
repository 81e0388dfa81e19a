"""Command-line entry point.

Subcommands: `gen-cohort` writes a patient cohort plus its hidden-truth
sidecar; `train` runs the sequential evolution loop over a cohort; `eval`
scores frozen bases on a held-out cohort or a multi-choice file; and
`read-books` ingests documents into the case bases. Exit codes: 0 success,
1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from . import evaluation as eval_mod
from . import world as world_mod
from .config import RunConfig, load_run_config
from .doctor import DoctorAgent, read_books
from .errors import ConfigError, HospitalSimError
from .knowledge import load_knowledge_base
from .memory import TASKS, load_base
from .patients import Cohort, CohortSpec, sample_cohort
from .world import SimulationLog, World

logger = logging.getLogger(__name__)

USAGE_ERROR = 2
RUNTIME_ERROR = 1


def _load_config(config_path: str | None, seed: int | None,
                 output_dir: str | None) -> RunConfig:
    try:
        return load_run_config(config_path, seed=seed, output_dir=output_dir)
    except (ConfigError, FileNotFoundError) as exc:
        raise click.exceptions.Exit(_fail(str(exc), USAGE_ERROR))


def _fail(message: str, code: int) -> int:
    click.echo(f"error: {message}", err=True)
    return code


@click.group()
@click.option("--verbose", is_flag=True, help="Enable debug logging.")
def main(verbose: bool):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command("gen-cohort")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--department", required=True)
@click.option("--size", type=int, required=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--llm", "use_llm", is_flag=True,
              help="Generate with the configured backend instead of the template sampler.")
def gen_cohort(config_path, seed, department, size, out_dir, use_llm):
    """Generate a QC-passed cohort for one department."""
    config = _load_config(config_path, seed, out_dir)
    config.echo(out_dir)
    try:
        kb = load_knowledge_base(config.knowledge)
        diseases = [d for d in kb.diseases if d.department_id == department]
        if not diseases:
            kb.department(department)  # raises for unknown ids
            raise ConfigError(f"department {department!r} has no diseases in the knowledge base")
        spec = CohortSpec(
            department_id=department,
            disease_weights={d.disease_id: 1.0 for d in diseases},
            size=size,
            seed=config.seed,
        )
        backend = config.build_backend() if use_llm else None
        cohort = sample_cohort(kb, spec, backend=backend,
                               templates=config.build_templates())
        path, sidecar = cohort.save(Path(out_dir) / "cohort.jsonl")
    except HospitalSimError as exc:
        raise click.exceptions.Exit(_fail(str(exc), USAGE_ERROR))
    click.echo(f"wrote {len(cohort)} records to {path}")
    click.echo(f"hidden truth sidecar: {sidecar}")
    click.echo("qc: all records passed (factory re-draws until the gate passes)")


def _build_world(config: RunConfig, kb, department: str) -> World:
    world_config = config.world
    world_config.departments_enabled = [department]
    if world_config.seed == 0:
        world_config.seed = config.seed
    return World(
        kb=kb,
        config=world_config,
        doctor_config=config.doctor,
        templates=config.build_templates(),
    )


def _base_paths(out_dir: Path, department: str) -> dict[tuple[str, str], Path]:
    paths = {}
    for task in TASKS:
        paths[(task, "cases")] = out_dir / department / f"{task}.cases.jsonl"
        paths[(task, "experience")] = out_dir / department / f"{task}.experience.jsonl"
    return paths


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--cohort", "cohort_path", required=True, type=click.Path(exists=True))
@click.option("--department", required=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--force", is_flag=True, help="Overwrite existing bases in the output directory.")
@click.option("--resume", is_flag=True, help="Continue from the checkpoint in the output directory.")
def train(config_path, seed, cohort_path, department, out_dir, force, resume):
    """Sequential evolution run over a cohort; writes bases, audit log,
    checkpoint, and curve exports."""
    config = _load_config(config_path, seed, out_dir)
    out = Path(out_dir)
    config.echo(out)
    base_paths = _base_paths(out, department)
    existing = [p for p in base_paths.values() if p.exists()]
    if existing and not (force or resume):
        raise click.exceptions.Exit(_fail(
            f"bases already exist under {out / department} (use --force to overwrite "
            f"or --resume to continue)", USAGE_ERROR))
    try:
        kb = load_knowledge_base(config.knowledge)
        kb.department(department)
        cohort = Cohort.load(cohort_path)
        world = _build_world(config, kb, department)
        checkpoint_path = out / "checkpoint.json"
        log_path = out / "events.jsonl"
        doctor = world.doctors[department]
        log_offset = None
        if resume:
            payload = world_mod.load_checkpoint(checkpoint_path)
            log_offset = payload.get("log_offset")
            for (task, kind), path in base_paths.items():
                offset = payload["base_offsets"].get(str(path))
                if offset is not None and path.exists():
                    with open(path, "r+b") as fh:
                        fh.truncate(offset)
                if path.exists():
                    loaded = load_base(path)
                    if kind == "cases":
                        doctor.case_bases[task] = loaded
                    else:
                        doctor.experience_bases[task] = loaded
        world.log = SimulationLog(log_path, resume=resume, truncate_to=log_offset)
        for (task, kind), path in base_paths.items():
            base = doctor.case_bases[task] if kind == "cases" else doctor.experience_bases[task]
            if not resume and path.exists():
                path.unlink()
            base.attach(path)
        backend = config.build_backend()
        world_mod.run(world, cohort, mode="train", backend=backend,
                      checkpoint_path=checkpoint_path, resume=resume)
        world.log.close()
        for task in TASKS:
            doctor.case_bases[task].detach()
            doctor.experience_bases[task].detach()
        series = [s for s in (eval_mod.series_from_log(world.log, task) for task in TASKS)
                  if s.outcomes]
        eval_mod.export_curves(series, out / "curves.csv", fmt="csv",
                               department=department)
        eval_mod.export_curves(series, out / "curves.json", fmt="json",
                               department=department)
    except HospitalSimError as exc:
        raise click.exceptions.Exit(_fail(str(exc), RUNTIME_ERROR))
    click.echo(f"trained on {len(cohort)} patients")
    for task in TASKS:
        sizes = doctor.base_sizes()[task]
        click.echo(f"{task}: cases={sizes['cases']} experience={sizes['experience']}")
    for s in series:
        final_n, final_acc = eval_mod.cumulative_accuracy(s)[-1]
        click.echo(f"final cumulative accuracy ({s.task}): {final_acc:.4f} over {final_n}")


def _load_doctor(out_dir: Path, department: str, config: RunConfig) -> DoctorAgent:
    doctor = DoctorAgent(
        doctor_id=f"doc-{department}", name=f"Dr. {department.title()}",
        department_id=department, config=config.doctor,
    )
    for (task, kind), path in _base_paths(out_dir, department).items():
        if path.exists():
            loaded = load_base(path)
            if kind == "cases":
                doctor.case_bases[task] = loaded
            else:
                doctor.experience_bases[task] = loaded
    return doctor


@main.command("eval")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--department", required=True)
@click.option("--cohort", "cohort_path", type=click.Path(exists=True), default=None)
@click.option("--mcq", "mcq_path", type=click.Path(exists=True), default=None)
@click.option("--bases", "bases_dir", type=click.Path(exists=True), default=None,
              help="Directory holding trained bases (defaults to --out).")
@click.option("--train-checkpoint", type=click.Path(exists=True), default=None,
              help="Checkpoint of the training run, used for the overlap check.")
@click.option("--hybrid-train", type=click.Path(exists=True), default=None,
              help="Labeled MCQ training split to merge into the case base first.")
@click.option("--out", "out_dir", required=True, type=click.Path())
def eval_command(config_path, seed, department, cohort_path, mcq_path, bases_dir,
                 train_checkpoint, hybrid_train, out_dir):
    """Frozen-base evaluation over a held-out cohort or an MCQ file."""
    if (cohort_path is None) == (mcq_path is None):
        raise click.exceptions.Exit(_fail("pass exactly one of --cohort or --mcq", USAGE_ERROR))
    config = _load_config(config_path, seed, out_dir)
    out = Path(out_dir)
    config.echo(out)
    try:
        kb = load_knowledge_base(config.knowledge)
        backend = config.build_backend()
        templates = config.build_templates()
        doctor = _load_doctor(Path(bases_dir) if bases_dir else out, department, config)
        report_path = out / "report.json"
        if cohort_path is not None:
            cohort = Cohort.load(cohort_path)
            train_hashes = None
            if train_checkpoint:
                train_hashes = set(
                    world_mod.load_checkpoint(train_checkpoint)["record_hashes"]
                )
            report = eval_mod.evaluate_tasks(
                doctor, cohort, kb, backend, templates,
                train_record_hashes=train_hashes,
            )
            report_path.write_text(
                json.dumps(report.to_dict(), indent=2, sort_keys=True), encoding="utf-8"
            )
            click.echo(report.table())
        else:
            items, skipped = eval_mod.load_mcq_items(mcq_path)
            if hybrid_train:
                hybrid_items, _ = eval_mod.load_mcq_items(hybrid_train)
                added = eval_mod.ingest_labeled_cases(doctor, hybrid_items, backend)
                click.echo(f"hybrid: ingested {added} labeled cases")
            report = eval_mod.evaluate_mcq(doctor, items, backend, templates,
                                           skipped=skipped)
            report_path.write_text(
                json.dumps(report.to_dict(), indent=2, sort_keys=True), encoding="utf-8"
            )
            click.echo(f"mcq accuracy: {report.accuracy * 100:.2f}% "
                       f"({report.correct}/{report.total}, {report.skipped} skipped)")
        click.echo(f"report: {report_path}")
    except HospitalSimError as exc:
        raise click.exceptions.Exit(_fail(str(exc), RUNTIME_ERROR))


@main.command("read-books")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--department", required=True)
@click.option("--documents", "documents_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
def read_books_command(config_path, seed, department, documents_dir, out_dir):
    """Convert documents into multi-choice cases and ingest them."""
    config = _load_config(config_path, seed, out_dir)
    out = Path(out_dir)
    config.echo(out)
    try:
        kb = load_knowledge_base(config.knowledge)
        kb.department(department)
        backend = config.build_backend()
        templates = config.build_templates()
        doctor = _load_doctor(out, department, config)
        doc_paths = sorted(Path(documents_dir).glob("*.txt")) + sorted(
            Path(documents_dir).glob("*.md")
        )
        if not doc_paths:
            raise ConfigError(f"no .txt or .md documents under {documents_dir}")
        total_added = 0
        total_skipped = 0
        for doc_path in doc_paths:
            report = read_books(doctor, [doc_path.read_text(encoding="utf-8")],
                                backend, templates)
            total_added += report.cases_added
            total_skipped += report.items_skipped
            click.echo(f"{doc_path.name}: {report.cases_added} items ingested, "
                       f"{report.items_skipped} skipped")
        for (task, kind), path in _base_paths(out, department).items():
            base = (doctor.case_bases[task] if kind == "cases"
                    else doctor.experience_bases[task])
            base.save(path)
        click.echo(f"total: {total_added} cases added, {total_skipped} items skipped")
    except HospitalSimError as exc:
        raise click.exceptions.Exit(_fail(str(exc), RUNTIME_ERROR))


if __name__ == "__main__":
    sys.exit(main())
