from typing import Dict, Any, List, Optional
from pathlib import Path
import logging

import pandas as pd

from config import ModelConfig, RunConfig
from .data import build_frame, load_csv
from .decomp import decompose, fit_models
from .errors import IvGapError
from .estimators import first_stage_summary
from .inference import dwh_test
from .report import (
    build_metadata,
    checks_table,
    decomposition_table,
    format_decomposition,
    write_csv,
    write_json,
)
from .synthlab import DiscreteDgp, mc_study, sample, verify_identities
from .weights import group_weights, treatment_level_weights, weight_report

logger = logging.getLogger(__name__)


class Orchestrator:
    """Runs one subcommand end to end and writes its result files"""

    def __init__(self, run: RunConfig):
        self.run = run
        self.written: List[Path] = []

    def execute(self) -> List[Path]:
        handlers = {
            "decompose": self._decompose,
            "weights": self._weights,
            "dwh-test": self._dwh_test,
            "first-stage": self._first_stage,
            "simulate": self._simulate,
            "oracle-check": self._oracle_check,
            "mc-study": self._mc_study,
        }
        logger.info(f"Running {self.run.command}")
        try:
            handlers[self.run.command]()
        except IvGapError as e:
            logger.error(f"{self.run.command} failed: {e.to_dict()}")
            raise
        return self.written

    def _load_frame(self):
        run = self.run
        model = ModelConfig.load(run.model)
        schema = model.schema()
        if run.weights:
            schema.setdefault(run.weights, "numeric")
        if run.cluster:
            schema.setdefault(run.cluster, "categorical")
        dataset = load_csv(run.data, schema)
        return build_frame(dataset, model, mode=run.mode, weights=run.weights, cluster=run.cluster)

    def _metadata(self, mode: Optional[str] = None, **extra: Any) -> Dict[str, Any]:
        run = self.run
        return build_metadata(run.command, run.seed, mode, run.se, run.threads, **extra)

    def _emit(self, stem: str, payload: Dict[str, Any], tables: Dict[str, pd.DataFrame], metadata: Dict[str, Any]):
        out = self.run.out
        if self.run.format in ("json", "both"):
            self.written.append(write_json(out / f"{stem}.json", payload, metadata))
        if self.run.format in ("csv", "both"):
            for name, table in tables.items():
                self.written.append(write_csv(out / f"{name}.csv", table))

    def _frame_metadata(self, frame, **extra: Any) -> Dict[str, Any]:
        return self._metadata(
            frame.mode,
            mode_source=frame.mode_source,
            did_cell_check=frame.did_check,
            n=frame.n,
            dropped_rows=frame.source.dropped,
            **extra,
        )

    def _decompose(self):
        frame = self._load_frame()
        result = decompose(frame, regime=self.run.se, compare_se=self.run.compare_se)
        metadata = self._frame_metadata(result.fits.frame)
        self._emit("decomposition", result.to_dict(), {"decomposition": decomposition_table(result)}, metadata)
        table_path = self.run.out / "decomposition.txt"
        table_path.write_text(format_decomposition(result), encoding="utf-8")
        self.written.append(table_path)

    def _weights(self):
        frame = self._load_frame()
        fits = fit_models(frame)
        profile = treatment_level_weights(fits.rframe, self.run.bin)
        groups = None
        if fits.frame.groups is not None:
            groups = group_weights(fits.rframe, fits.frame.groups, with_subsample=True)
        report = weight_report(profile, groups)
        tables = {"weights_levels": report.levels}
        if report.groups is not None:
            tables["weights_groups"] = report.groups
        self._emit("weights", report.to_dict(), tables, self._frame_metadata(fits.frame, bin_floor=self.run.bin))

    def _dwh_test(self):
        frame = self._load_frame()
        result = decompose(frame, regime=self.run.se)
        test = dwh_test(result.fits.rframe, result.fits.cm, self.run.se)
        payload = {
            "statistic": test.statistic,
            "p_value": test.p_value,
            "beta_iv_minus_beta_cl": test.diff,
            "se": test.se_diff,
            "reduced_form_numerator": test.reduced_form_numerator,
            "se_numerator": test.se_numerator,
            "beta_iv": result.beta_iv.value,
            "beta_cl": result.beta_cl.value,
        }
        table = pd.DataFrame([payload])
        self._emit("dwh", payload, {"dwh": table}, self._frame_metadata(result.fits.frame))

    def _first_stage(self):
        frame = self._load_frame()
        summary = first_stage_summary(frame)
        payload = {
            "f_statistic": summary.f_stat,
            "f_label": summary.label,
            "df": summary.df,
            "n_clusters": summary.n_clusters,
            "perfect_fit": summary.perfect_fit,
            "coefficients": summary.table().to_dict(orient="records"),
        }
        self._emit("first_stage", payload, {"first_stage": summary.table()}, self._frame_metadata(frame))

    def _simulate(self):
        dgp = DiscreteDgp.load(self.run.dgp)
        dataset = sample(dgp, self.run.n, seed=self.run.seed)
        raw = dataset.frame.copy()
        for column in raw.columns:
            if isinstance(raw[column].dtype, pd.CategoricalDtype):
                raw[column] = raw[column].astype(str)
        self.written.append(write_csv(self.run.out / "sample.csv", raw))
        metadata = self._metadata(dgp.mode, population=dgp.name, n=self.run.n)
        self.written.append(write_json(self.run.out / "sample_metadata.json", {"columns": list(raw.columns)}, metadata))

    def _oracle_check(self):
        dgp = DiscreteDgp.load(self.run.dgp)
        report = verify_identities(dgp)
        if not report.all_passed:
            logger.warning(f"{len(report.failures)} oracle checks failed on '{dgp.name}'")
        metadata = self._metadata(dgp.mode, population=dgp.name)
        self._emit("oracle_report", report.to_dict(), {"oracle_checks": checks_table(report.checks)}, metadata)

    def _mc_study(self):
        run = self.run
        dgp = DiscreteDgp.load(run.dgp)
        summary = mc_study(dgp, run.n, run.reps, run.seed, run.targets, run.threads, run.se)
        metadata = self._metadata(dgp.mode, population=dgp.name, n=run.n, reps=run.reps)
        self._emit("mc_summary", summary.to_dict(), {"mc_summary": summary.table}, metadata)
