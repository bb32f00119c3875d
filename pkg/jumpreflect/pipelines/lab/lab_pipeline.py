# Copyright (c) jumpreflect contributors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

import asyncio
import logging
import sys
import typing as tp
from pathlib import Path

import hydra
from omegaconf import DictConfig, OmegaConf

from jumpreflect.bsde.chaos_lab import (
    MIN_RATE_POINTS,
    SweepPlan,
    aggregate_rate_report,
    rate_frame,
    write_rate_csv,
)
from jumpreflect.bsde.jump_model import EnsembleKind
from jumpreflect.bsde.mean_reflected import PicardNonConvergence
from jumpreflect.core import utils
from jumpreflect.modules import regularity, solve_particles, solve_single
from jumpreflect.modules.chaos_rate import (
    ChaosJobsConfig,
    ChaosJobsModule,
    LimitSolveConfig,
    LimitSolveModule,
)
from jumpreflect.modules.problem_config import ensemble_kind
from jumpreflect.modules.regularity import (
    RegularityProbeConfig,
    RegularityProbeModule,
)
from jumpreflect.modules.solve_particles import (
    SolveParticlesConfig,
    SolveParticlesModule,
)
from jumpreflect.modules.solve_single import SolveSingleConfig, SolveSingleModule
from jumpreflect.pipelines.lab.configs import SUBCOMMANDS, LabConfig
from jumpreflect.pipelines.lab.validate import (
    ConfigGuardError,
    ValidateProblemConfig,
    ValidateProblemModule,
    ValidationFailed,
    ValidationReport,
)

logger = logging.getLogger("jumpreflect.lab")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_VALIDATION = 2
EXIT_CONFIG_GUARD = 3


class LabPipeline:
    def __init__(self, config: DictConfig):
        self.config: LabConfig = utils.promote_config(config, LabConfig)
        self.output_dir = utils.ensure_dir(Path(self.config.output_dir).resolve())
        self.launcher = hydra.utils.instantiate(self.config.launcher)
        OmegaConf.save(config=self.config, f=str(self.output_dir / "lab.yaml"))
        OmegaConf.set_readonly(self.config, True)
        # modules get detached copies of the shared sections
        self.problem = OmegaConf.to_container(self.config.problem, resolve=True)
        self.solver = OmegaConf.to_container(self.config.solver, resolve=True)

    def check_guards(self) -> None:
        sub = self.config.subcommand
        exp = self.config.experiment
        if sub not in SUBCOMMANDS:
            raise ValueError(
                f"unknown subcommand {sub!r}, expected one of {', '.join(SUBCOMMANDS)}"
            )
        if sub == "chaos-rate":
            distinct = sorted(set(exp.particle_counts))
            if len(distinct) < MIN_RATE_POINTS:
                raise ConfigGuardError(
                    f"a rate needs >= {MIN_RATE_POINTS} distinct particle counts,"
                    f" got {distinct}"
                )
            if exp.replicates < 2:
                raise ConfigGuardError(
                    f"standard errors need >= 2 replicates, got {exp.replicates}"
                )
            if self.config.jobs < 1:
                raise ConfigGuardError(f"jobs must be >= 1, got {self.config.jobs}")
        if sub == "solve-particles" and exp.particles < 1:
            raise ConfigGuardError(f"particles must be >= 1, got {exp.particles}")
        if sub == "probe-regularity" and exp.levels < 2:
            raise ConfigGuardError(f"levels must be >= 2, got {exp.levels}")

    async def validate(self) -> ValidationReport:
        module = ValidateProblemModule(
            ValidateProblemConfig(
                problem=self.problem,
                solver=self.solver,
                output_dir=str(self.output_dir),
                pilot_paths=self.config.experiment.pilot_paths,
                master_seed=self.config.master_seed,
                probe_points=self.config.experiment.probe_points,
            )
        )
        outputs = await self.launcher.schedule(module)
        return outputs["validation"]

    async def run(self) -> str:
        """runs the subcommand and returns its one line summary"""
        self.check_guards()
        sub = self.config.subcommand
        validation = await self.validate()
        if not validation.passed:
            if sub == "validate" or not self.config.force:
                raise ValidationFailed(validation)
            logger.warning(
                "assumption checks failed, solving anyway because force=true"
            )
        if sub == "validate":
            return f"all {len(validation.checks)} assumption checks passed"
        if sub == "solve-single":
            return await self.solve_single()
        if sub == "solve-particles":
            return await self.solve_particles()
        if sub == "chaos-rate":
            return await self.chaos_rate()
        return await self.probe_regularity()

    async def solve_single(self) -> str:
        exp = self.config.experiment
        module = SolveSingleModule(
            SolveSingleConfig(
                problem=self.problem,
                solver=self.solver,
                output_dir=str(self.output_dir),
                paths=exp.paths,
                master_seed=self.config.master_seed,
                dump_csv=exp.dump_csv,
            )
        )
        return solve_single.summary_line(await self.launcher.schedule(module))

    async def solve_particles(self) -> str:
        exp = self.config.experiment
        module = SolveParticlesModule(
            SolveParticlesConfig(
                problem=self.problem,
                solver=self.solver,
                output_dir=str(self.output_dir),
                particles=exp.particles,
                paths=exp.paths,
                master_seed=self.config.master_seed,
                bound_probe_counts=list(exp.bound_probe_counts),
                dump_csv=exp.dump_csv,
                dump_max_rows=exp.dump_max_rows,
            )
        )
        return solve_particles.summary_line(await self.launcher.schedule(module))

    async def chaos_rate(self) -> str:
        exp = self.config.experiment
        exact = ensemble_kind(self.config.solver) == EnsembleKind.EXACT_TREE
        plan = SweepPlan(
            particle_counts=list(exp.particle_counts),
            replicates=exp.replicates,
            paths=None if exact else exp.paths,
            master_seed=self.config.master_seed,
            reference_factor=exp.reference_factor,
            jobs=self.config.jobs,
            failure_budget=exp.failure_budget,
        )
        limit_file = await self.launcher.schedule(
            LimitSolveModule(
                LimitSolveConfig(
                    problem=self.problem,
                    solver=self.solver,
                    output_dir=str(self.output_dir),
                    paths=exp.reference_factor * exp.paths,
                    seed=plan.reference_seed(),
                )
            )
        )
        batches = await self.launcher.schedule(
            ChaosJobsModule(
                ChaosJobsConfig(
                    problem=self.problem,
                    solver=self.solver,
                    limit_file=str(limit_file),
                    particle_counts=list(exp.particle_counts),
                    replicates=exp.replicates,
                    paths=exp.paths,
                    master_seed=self.config.master_seed,
                    jobs=self.config.jobs,
                )
            )
        )
        rows = [row for batch in batches for row in batch]
        report = aggregate_rate_report(rows, plan.failure_budget)
        csv_file = write_rate_csv(rate_frame(rows), self.output_dir / "chaos_rates.csv")
        payload = report.to_dict()
        payload.update(
            problem=self.config.problem.name,
            backend=self.config.solver.backend,
            master_seed=self.config.master_seed,
            csv=csv_file,
        )
        report_file = utils.write_json(self.output_dir / "chaos_report.json", payload)
        slopes = ", ".join(
            f"{m} slope {fit.slope:.3f}+-{fit.half_width:.3f}"
            for m, fit in report.slopes.items()
        )
        flag = " (some jobs failed)" if report.failures else ""
        return f"{slopes}{flag} report={report_file}"

    async def probe_regularity(self) -> str:
        exp = self.config.experiment
        module = RegularityProbeModule(
            RegularityProbeConfig(
                problem=self.problem,
                solver=self.solver,
                output_dir=str(self.output_dir),
                base_steps=exp.base_steps,
                levels=exp.levels,
                lags=list(exp.lags),
                paths=exp.paths,
                master_seed=self.config.master_seed,
            )
        )
        return regularity.summary_line(await self.launcher.schedule(module))


def _error_details(e: Exception) -> tp.Dict[str, tp.Any]:
    if isinstance(e, ValidationFailed):
        return e.report.to_dict()
    if isinstance(e, PicardNonConvergence):
        return {"picard_log": e.log}
    return {}


def write_error(
    output_dir: tp.Optional[str], subcommand: str, e: Exception
) -> tp.Optional[Path]:
    if not output_dir:
        return None
    payload = {
        "subcommand": subcommand,
        "error": type(e).__name__,
        "message": str(e),
        "details": _error_details(e),
    }
    try:
        return utils.write_json(utils.ensure_dir(output_dir) / "error.json", payload)
    except OSError:
        logger.exception(f"could not write error.json in {output_dir}")
        return None


def run_subcommand(config: DictConfig) -> int:
    """runs one lab subcommand and returns the process exit status"""
    subcommand = str(config.get("subcommand", "?"))
    output_dir = OmegaConf.select(config, "output_dir", default=None)
    try:
        pipeline = LabPipeline(config)
        print(asyncio.run(pipeline.run()))
        return EXIT_OK
    except ValidationFailed as e:
        logger.error(str(e))
        write_error(output_dir, subcommand, e)
        return EXIT_VALIDATION
    except ConfigGuardError as e:
        logger.error(str(e))
        write_error(output_dir, subcommand, e)
        return EXIT_CONFIG_GUARD
    except Exception as e:
        logger.exception(f"{subcommand} failed")
        write_error(output_dir, subcommand, e)
        return EXIT_ERROR


@hydra.main(config_path="conf", config_name="lab", version_base="1.1")
def main(config: DictConfig) -> None:
    status = run_subcommand(config)
    if status != EXIT_OK:
        sys.exit(status)


if __name__ == "__main__":
    main()
