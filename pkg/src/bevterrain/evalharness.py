"""Region-partitioned evaluation: elevation MAE per region, risk MSE and
hazard classification metrics under a fatal-risk threshold, and coverage."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gridmap import GridMap, RegionLabel, center_crop, downsample_micro_to_short

REPORT_SCHEMA_VERSION = 1
REGION_NAMES = ("ObsPC", "ObsF", "Unobs")


@dataclass(frozen=True)
class EvalConfig:
    fatal_risk_threshold: float = 0.9
    regions: tuple = REGION_NAMES
    ranges: tuple = ("micro", "short")

    def __post_init__(self):
        if not (0.0 < self.fatal_risk_threshold < 1.0):
            raise ValueError("fatal risk threshold must be inside (0, 1)")


@dataclass
class RiskMetrics:
    mse: float
    precision: float
    recall: float
    f1: float
    precision_defined: bool = True
    recall_defined: bool = True


@dataclass
class EvalReport:
    system: str
    range_id: str
    fatal_risk_threshold: float
    mae: dict = field(default_factory=dict)  # region -> (mae, cell count); "Total" included
    risk: RiskMetrics = None
    coverage: dict = field(default_factory=dict)  # region -> percent

    CSV_HEADER = (
        f"# report_schema=v{REPORT_SCHEMA_VERSION}\n"
        "range,system,fatal_threshold,mae_obspc,mae_obsf,mae_unobs,mae_total,"
        "risk_mse,precision,recall,f1,cov_obspc,cov_obsf,cov_unobs"
    )

    def csv_row(self) -> str:
        def fmt(x):
            return f"{x:.6g}" if x is not None else ""

        cells = [self.range_id, self.system, fmt(self.fatal_risk_threshold)]
        for region in REGION_NAMES + ("Total",):
            entry = self.mae.get(region)
            cells.append(fmt(entry[0]) if entry else "")
        cells += [fmt(self.risk.mse), fmt(self.risk.precision), fmt(self.risk.recall), fmt(self.risk.f1)]
        cells += [fmt(self.coverage.get(r)) for r in REGION_NAMES]
        return ",".join(cells)


def f1_score(precision: float, recall: float) -> float:
    if precision + recall <= 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def mae_by_region(pred, pred_valid, gt, gt_valid, region) -> dict:
    """Mean absolute error in meters per region plus the cell-weighted Total.

    Only cells with both a defined prediction and defined ground truth
    count; regions without any such cell are absent from the result.
    """
    both = np.asarray(pred_valid, dtype=bool) & np.asarray(gt_valid, dtype=bool)
    err = np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64))
    out = {}
    total_sum = 0.0
    total_cnt = 0
    for label in RegionLabel:
        m = both & (region == int(label))
        cnt = int(m.sum())
        if cnt:
            s = float(err[m].sum())
            out[label.name] = (s / cnt, cnt)
            total_sum += s
            total_cnt += cnt
    if total_cnt:
        out["Total"] = (total_sum / total_cnt, total_cnt)
    return out


def risk_metrics(pred, pred_valid, gt, gt_valid, config: EvalConfig = EvalConfig()) -> RiskMetrics:
    """MSE plus hazard classification metrics at the fatal threshold."""
    both = np.asarray(pred_valid, dtype=bool) & np.asarray(gt_valid, dtype=bool)
    if not np.any(both):
        raise ValueError("risk metrics with no jointly defined cells")
    p = np.asarray(pred, dtype=np.float64)[both]
    g = np.asarray(gt, dtype=np.float64)[both]
    mse = float(np.mean((p - g) ** 2))
    th = config.fatal_risk_threshold
    ph = p >= th
    gh = g >= th
    tp = int(np.sum(ph & gh))
    fp = int(np.sum(ph & ~gh))
    fn = int(np.sum(~ph & gh))
    precision = tp / (tp + fp) if (tp + fp) else 0.0
    recall = tp / (tp + fn) if (tp + fn) else 0.0
    return RiskMetrics(
        mse=mse,
        precision=precision,
        recall=recall,
        f1=f1_score(precision, recall),
        precision_defined=(tp + fp) > 0,
        recall_defined=(tp + fn) > 0,
    )


def coverage(defined, region) -> dict:
    """Percent of cells carrying a defined estimate, per region."""
    defined = np.asarray(defined, dtype=bool)
    out = {}
    for label in RegionLabel:
        m = region == int(label)
        total = int(m.sum())
        if total:
            out[label.name] = 100.0 * float(defined[m].sum()) / total
    return out


def consistency_mae_m(short_grid: GridMap, micro_grid: GridMap) -> float:
    """Mean absolute disagreement (meters) between the center-cropped short
    and downsampled micro elevation."""
    s, s_ok = short_grid.layer("elevation")
    m, m_ok = micro_grid.layer("elevation")
    cs = center_crop(s)
    cok = center_crop(s_ok)
    dm, dok = downsample_micro_to_short(m, m_ok)
    both = cok & dok
    if not np.any(both):
        raise ValueError("no overlap between ranges")
    return float(np.mean(np.abs(cs[both] - dm[both])))


class _Accumulator:
    """Cell-count-weighted aggregation of one system/range over samples."""

    def __init__(self):
        self.abs_sum = {r: 0.0 for r in REGION_NAMES}
        self.cnt = {r: 0 for r in REGION_NAMES}
        self.sq_sum = 0.0
        self.sq_cnt = 0
        self.tp = self.fp = self.fn = 0
        self.defined = {r: 0 for r in REGION_NAMES}
        self.total = {r: 0 for r in REGION_NAMES}

    def add(self, pred_grid: GridMap, gt_grid: GridMap, threshold: float):
        region = gt_grid.data["region"].astype(np.int64)
        ele, ele_ok = pred_grid.layer("elevation")
        gte, gte_ok = gt_grid.layer("elevation")
        both = ele_ok & gte_ok
        err = np.abs(ele - gte)
        for label in RegionLabel:
            m = region == int(label)
            self.total[label.name] += int(m.sum())
            self.defined[label.name] += int((ele_ok & m).sum())
            mm = both & m
            self.abs_sum[label.name] += float(err[mm].sum())
            self.cnt[label.name] += int(mm.sum())
        risk, risk_ok = pred_grid.layer("risk")
        gtr, gtr_ok = gt_grid.layer("risk")
        both = risk_ok & gtr_ok
        if np.any(both):
            p = risk[both]
            g = gtr[both]
            self.sq_sum += float(np.sum((p - g) ** 2))
            self.sq_cnt += int(both.sum())
            ph = p >= threshold
            gh = g >= threshold
            self.tp += int(np.sum(ph & gh))
            self.fp += int(np.sum(ph & ~gh))
            self.fn += int(np.sum(~ph & gh))

    def report(self, system: str, range_id: str, threshold: float) -> EvalReport:
        mae = {}
        tot_s = 0.0
        tot_c = 0
        for r in REGION_NAMES:
            if self.cnt[r]:
                mae[r] = (self.abs_sum[r] / self.cnt[r], self.cnt[r])
                tot_s += self.abs_sum[r]
                tot_c += self.cnt[r]
        if tot_c:
            mae["Total"] = (tot_s / tot_c, tot_c)
        precision = self.tp / (self.tp + self.fp) if (self.tp + self.fp) else 0.0
        recall = self.tp / (self.tp + self.fn) if (self.tp + self.fn) else 0.0
        risk = RiskMetrics(
            mse=self.sq_sum / self.sq_cnt if self.sq_cnt else 0.0,
            precision=precision,
            recall=recall,
            f1=f1_score(precision, recall),
            precision_defined=(self.tp + self.fp) > 0,
            recall_defined=(self.tp + self.fn) > 0,
        )
        cov = {r: 100.0 * self.defined[r] / self.total[r] for r in REGION_NAMES if self.total[r]}
        return EvalReport(
            system=system, range_id=range_id, fatal_risk_threshold=threshold, mae=mae, risk=risk, coverage=cov
        )


def baseline_producer(sample):
    """Raw-voxel observed-cell maps (partial coverage stand-in)."""
    return {"micro": sample.baseline_micro, "short": sample.baseline_short}


def compare(systems: dict, dataset, config: EvalConfig = EvalConfig()):
    """Evaluate named map producers over a dataset.

    Each producer maps a sample to {"micro": GridMap, "short": GridMap}.
    Returns {(system, range_id): EvalReport} with exact count-weighted
    aggregation across samples.
    """
    if not dataset:
        raise ValueError("empty evaluation dataset")
    acc = {(name, rid): _Accumulator() for name in systems for rid in config.ranges}
    for sample in dataset:
        gt = {"micro": sample.gt_micro, "short": sample.gt_short}
        for name, producer in systems.items():
            maps = producer(sample)
            for rid in config.ranges:
                acc[(name, rid)].add(maps[rid], gt[rid], config.fatal_risk_threshold)
    return {
        key: a.report(key[0], key[1], config.fatal_risk_threshold) for key, a in acc.items()
    }


def reports_to_csv(reports) -> str:
    lines = [EvalReport.CSV_HEADER]
    for key in sorted(reports):
        lines.append(reports[key].csv_row())
    return "\n".join(lines) + "\n"


def reports_to_table(reports) -> str:
    """Aligned text table, one block per range."""
    cols = ["system", "MAE ObsPC", "MAE ObsF", "MAE Unobs", "MAE Total", "MSE", "Prec", "Recall", "F1",
            "Cov ObsPC", "Cov ObsF", "Cov Unobs"]
    blocks = []
    ranges = sorted({k[1] for k in reports})
    for rid in ranges:
        rows = [cols]
        for (name, r), rep in sorted(reports.items()):
            if r != rid:
                continue
            row = [name]
            for region in REGION_NAMES + ("Total",):
                e = rep.mae.get(region)
                row.append(f"{e[0]:.3f}" if e else "-")
            row += [f"{rep.risk.mse:.4f}", f"{rep.risk.precision:.3f}", f"{rep.risk.recall:.3f}", f"{rep.risk.f1:.3f}"]
            for region in REGION_NAMES:
                c = rep.coverage.get(region)
                row.append(f"{c:.1f}" if c is not None else "-")
            rows.append(row)
        widths = [max(len(r[i]) for r in rows) for i in range(len(cols))]
        lines = [f"== {rid} range =="]
        for r in rows:
            lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"
