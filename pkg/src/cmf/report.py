"""Training reports: per-epoch metrics, phase timings, serialization.

Reports are line-delimited JSON. Each epoch emits one record with
``"record": "epoch"`` and the fields of :class:`EpochRecord`; a final
``"record": "summary"`` line carries run-level fields. All wall times are
seconds. Phase names follow the two-step update: ``hermitian`` (split into
``stage``/``accumulate``/``store``), ``bias``, ``solve``, and ``eval``;
``update`` holds the SGD pass time and is zero for ALS engines.
"""

import json
from dataclasses import dataclass, field, asdict


@dataclass
class PhaseTimes:
    """Wall-time breakdown of one half-update (or a full epoch when summed)."""

    stage: float = 0.0       # gather feature rows into the staging buffer
    accumulate: float = 0.0  # tiled outer-product accumulation
    store: float = 0.0       # pack / precision-convert / write out
    bias: float = 0.0        # right-hand-side assembly
    solve: float = 0.0
    eval: float = 0.0
    update: float = 0.0      # SGD sample pass

    @property
    def hermitian(self) -> float:
        return self.stage + self.accumulate + self.store

    def __iadd__(self, other: "PhaseTimes") -> "PhaseTimes":
        for name in ("stage", "accumulate", "store", "bias", "solve", "eval", "update"):
            setattr(self, name, getattr(self, name) + getattr(other, name))
        return self


@dataclass
class EpochRecord:
    epoch: int
    objective: float
    objective_mid: float | None = None  # after the first half-update
    rmse: float | None = None
    time_hermitian: float = 0.0
    time_stage: float = 0.0
    time_accumulate: float = 0.0
    time_store: float = 0.0
    time_bias: float = 0.0
    time_solve: float = 0.0
    time_eval: float = 0.0
    time_update: float = 0.0
    cg_breakdowns: int = 0

    @classmethod
    def from_phases(cls, epoch, objective, times: PhaseTimes, **kw) -> "EpochRecord":
        return cls(
            epoch=epoch,
            objective=objective,
            time_hermitian=times.hermitian,
            time_stage=times.stage,
            time_accumulate=times.accumulate,
            time_store=times.store,
            time_bias=times.bias,
            time_solve=times.solve,
            time_eval=times.eval,
            time_update=times.update,
            **kw,
        )

    @property
    def epoch_time(self) -> float:
        return (self.time_hermitian + self.time_bias + self.time_solve
                + self.time_eval + self.time_update)


@dataclass
class TrainReport:
    """Everything a training run produced besides the factors themselves."""

    engine: str
    config: dict = field(default_factory=dict)
    epochs: list = field(default_factory=list)
    epochs_run: int = 0
    stop_reason: str = ""
    cold_rows: int = 0
    cold_cols: int = 0
    gram_bytes_x: int = 0
    gram_bytes_theta: int = 0
    flops: dict = field(default_factory=dict)

    def add_epoch(self, record: EpochRecord) -> None:
        self.epochs.append(record)
        self.epochs_run = len(self.epochs)

    @property
    def final_rmse(self) -> float | None:
        for rec in reversed(self.epochs):
            if rec.rmse is not None:
                return rec.rmse
        return None

    def rmse_trajectory(self):
        return [rec.rmse for rec in self.epochs]

    def total_time(self) -> float:
        return sum(rec.epoch_time for rec in self.epochs)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.epochs:
                row = {"record": "epoch"}
                row.update(asdict(rec))
                fh.write(json.dumps(row) + "\n")
            summary = {
                "record": "summary",
                "engine": self.engine,
                "config": self.config,
                "epochs_run": self.epochs_run,
                "stop_reason": self.stop_reason,
                "cold_rows": self.cold_rows,
                "cold_cols": self.cold_cols,
                "gram_bytes_x": self.gram_bytes_x,
                "gram_bytes_theta": self.gram_bytes_theta,
                "flops": self.flops,
            }
            fh.write(json.dumps(summary) + "\n")

    @classmethod
    def load(cls, path) -> "TrainReport":
        report = cls(engine="")
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                row = json.loads(line)
                kind = row.pop("record")
                if kind == "epoch":
                    report.add_epoch(EpochRecord(**row))
                elif kind == "summary":
                    for key in ("engine", "config", "epochs_run", "stop_reason",
                                "cold_rows", "cold_cols", "gram_bytes_x",
                                "gram_bytes_theta", "flops"):
                        setattr(report, key, row[key])
        return report
