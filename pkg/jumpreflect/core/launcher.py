# Copyright (c) jumpreflect contributors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

import asyncio
import dataclasses
import logging
import typing as tp
from pathlib import Path

import submitit
import tqdm
from omegaconf import OmegaConf
from submitit import AutoExecutor
from tqdm.contrib.logging import logging_redirect_tqdm

from jumpreflect.core import utils
from jumpreflect.core.cache import Cache, MissingCache, NoCache

if tp.TYPE_CHECKING:
    from jumpreflect.core.lab_module import LabModule

logger = logging.getLogger("jumpreflect.launcher")


@dataclasses.dataclass
class Submission:
    """One iteration of a module, either answered from cache or waiting on a job."""

    module: "LabModule"
    iteration_index: int
    iteration_value: tp.Any
    launcher: "Launcher"

    done: bool = dataclasses.field(default=False, init=False)
    job: tp.Optional[submitit.Job] = dataclasses.field(default=None, init=False)
    result: tp.Any = dataclasses.field(default=None, init=False, repr=False)
    attempts: tp.List[submitit.Job] = dataclasses.field(
        default_factory=list, init=False
    )

    def from_cache(self, result: tp.Any) -> "Submission":
        self.done = True
        self.result = result
        self.job = None
        return self

    def waiting_on(self, job: submitit.Job) -> "Submission":
        self.done = False
        self.job = job
        self.result = None
        return self

    async def wait(self) -> tp.Any:
        if self.done:
            return self.result
        max_attempts = 1 + self.launcher.max_retries
        attempt = 0
        while True:
            assert self.job is not None, "No job on pending submission."
            try:
                results = await self.job.awaitable().results()
                self.result = results[0]
                self.done = True
                break
            except Exception as ex:
                attempt += 1
                if attempt >= max_attempts or not self.module.should_retry(
                    ex=ex,
                    attempt=attempt,
                    iteration_value=self.iteration_value,
                    iteration_index=self.iteration_index,
                ):
                    raise
                self.attempts.append(self.job)
                self.waiting_on(
                    self.launcher.submit_job(
                        self.module, self.iteration_index, self.iteration_value
                    )
                )
                self.module.retry_counts[self.iteration_index] = len(self.attempts)
                logger.info(
                    f"retry #{len(self.attempts)} for "
                    f"{self.module.name()}:{self.iteration_index}"
                )
        if not self.module.validate(
            self.result,
            iteration_value=self.iteration_value,
            iteration_index=self.iteration_index,
        ):
            raise ValueError(
                f"invalid result for {self.module.name()}:{self.iteration_index}"
            )
        return self.result


class Launcher:
    def __init__(
        self,
        cache: tp.Optional[Cache] = None,
        config_dump_dir: tp.Optional[tp.Union[str, Path]] = None,
        log_folder: tp.Union[str, Path] = Path("executor_logs"),
        cluster: str = "local",
        partition: tp.Optional[str] = None,
        supports_mem_spec: bool = True,
        disable_tqdm: bool = False,
        max_retries: int = 0,
        max_jobarray_jobs: int = 1000,
        update_parameters: tp.Optional[dict] = None,
    ):
        """
         - `cache` stores results of finished module iterations
         - `config_dump_dir` receives the resolved config of every scheduled module
         - `log_folder` holds the submitit logs, one folder per module
         - `cluster`: `local` (subprocesses), `debug` (in process) or `slurm`
         - `max_jobarray_jobs` splits large arrays in several array submissions
        """
        self.cache = NoCache() if cache is None else cache
        self.config_dump_dir = (
            Path(config_dump_dir)
            if config_dump_dir is not None
            else Path.cwd() / "config_logs"
        )
        self.config_dump_dir.mkdir(parents=True, exist_ok=True)
        self.log_folder = Path(log_folder)
        self.cluster = cluster
        self.partition = partition
        self.supports_mem_spec = supports_mem_spec
        self.disable_tqdm = disable_tqdm
        self.progress_bar: tp.Optional[tqdm.tqdm] = None
        self.max_retries = max_retries
        self.max_jobarray_jobs = max_jobarray_jobs
        self.update_parameters = update_parameters

    def dump_config(self, module: "LabModule") -> Path:
        config_folder = utils.ensure_dir(self.config_dump_dir / module.name())
        config_file = config_folder / f"{module.sha_key()}.yaml"
        OmegaConf.save(config=module.config, f=config_file)
        return config_file

    def _progress_add(self, n: int) -> None:
        if self.disable_tqdm:
            return
        if self.progress_bar is None:
            self.progress_bar = tqdm.tqdm(total=n)
            return
        self.progress_bar.total += n
        self.progress_bar.refresh()

    def _progress_done(self) -> None:
        if self.progress_bar is not None:
            self.progress_bar.update(1)

    async def schedule(self, module: "LabModule") -> tp.Any:
        with logging_redirect_tqdm():
            self.dump_config(module)
            values = module.array()
            if values is None:
                self._progress_add(1)
                result = await self._schedule_single(module)
                self._progress_done()
                return result
            self._progress_add(len(values))
            return await self._schedule_array(module, values)

    def _get_executor(self, module: "LabModule") -> submitit.Executor:
        folder = utils.ensure_dir(self.log_folder / module.name())
        executor = AutoExecutor(folder=folder, cluster=self.cluster)
        if self.update_parameters:
            executor.update_parameters(**self.update_parameters)

        reqs = module.requirements()
        executor.update_parameters(
            name=module.name(),
            nodes=reqs.nodes,
            tasks_per_node=reqs.tasks_per_node,
            cpus_per_task=reqs.cpus_per_task,
            timeout_min=reqs.timeout_min,
        )
        if self.supports_mem_spec and reqs.mem_gb is not None:
            executor.update_parameters(mem_gb=reqs.mem_gb)
        if self.cluster == "slurm":
            if self.partition:
                executor.update_parameters(slurm_partition=self.partition)
            if reqs.constraint:
                executor.update_parameters(slurm_constraint=reqs.constraint)
        return executor

    def submit_job(
        self,
        module: "LabModule",
        iteration_index: int = 0,
        iteration_value: tp.Any = None,
    ) -> submitit.Job:
        executor = self._get_executor(module)
        return executor.submit(
            module,
            iteration_index=iteration_index,
            iteration_value=iteration_value,
            cache=self.cache,
        ).cancel_at_deletion()

    async def _schedule_single(self, module: "LabModule") -> tp.Any:
        try:
            cached = self.cache.get_cache(module)
            logger.info(f"{module.name()} done from cache")
            return cached
        except MissingCache:
            pass

        job = self.submit_job(module)
        logger.info(f"submitted single job for {module.name()}: {job.job_id}")
        result = await Submission(module, 0, None, launcher=self).waiting_on(job).wait()
        logger.info(f"{module.name()} done after full execution")
        return result

    async def _schedule_array(
        self, module: "LabModule", values: tp.List[tp.Any]
    ) -> tp.List[tp.Any]:
        module.retry_counts = [0] * len(values)
        submissions = []
        pending = []
        for idx, val in enumerate(values):
            sub = Submission(module, idx, val, launcher=self)
            try:
                sub.from_cache(
                    self.cache.get_cache(
                        module, iteration_value=val, iteration_index=idx
                    )
                )
                self._progress_done()
            except MissingCache:
                pending.append(sub)
            submissions.append(sub)

        logger.info(
            f"for {module.name()} found {len(values) - len(pending)} cached array"
            f" results, {len(pending)} left to compute"
        )
        if pending:
            executor = self._get_executor(module)
            for chunk in utils.batch(pending, self.max_jobarray_jobs):
                with executor.batch():
                    jobs = [
                        executor.submit(
                            sub.module,
                            iteration_index=sub.iteration_index,
                            iteration_value=sub.iteration_value,
                            cache=self.cache,
                        )
                        for sub in chunk
                    ]
                # batch() only fills the jobs once the context exits
                for sub, job in zip(chunk, jobs):
                    sub.waiting_on(job.cancel_at_deletion())
            logger.info(f"Logs at: {self.log_folder / module.name()}")

            # results arrive out of order, report progress as they come
            for waiting in asyncio.as_completed([sub.wait() for sub in pending]):
                try:
                    await waiting
                finally:
                    self._progress_done()

        return [sub.result for sub in submissions]
