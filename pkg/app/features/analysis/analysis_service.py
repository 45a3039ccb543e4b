from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union
import csv
import io
import json
import logging

import numpy as np

from app.core.error_handlers import (
    EmptyRegionError,
    ErrorMessages,
    InvalidParameterError,
    create_error,
    require_positive,
)
from app.core.volume import Volume
from app.core.volume_io import read_volume
from app.features.phantom.phantom_schema import PhantomSpec
from app.features.phantom.phantom_service import phantom_service
from app.utils import plotting
from app.utils.slice_preview import save_slice_png
from .analysis_schema import RC_COLUMNS, ProfileRecord, RCReport, RCRow

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class AnalysisService:
    """RC_max, RC curves, iteration spread and line profiles"""

    def rc_max(self, recon: Volume, roi: Volume, a_true: float) -> float:
        """
        Single-voxel recovery coefficient: max of recon over roi divided by a_true

        Ties resolve to the first voxel in linear order.
        """
        require_positive(a_true, "a_true")
        inside = np.flatnonzero(roi.linear() > 0)
        if inside.size == 0:
            raise create_error(
                EmptyRegionError,
                ErrorMessages.EMPTY_REGION.format(region=roi.metadata.get("diameter_mm", "roi")),
                field="roi",
            )
        values = recon.linear()[inside]
        return float(values[int(np.argmax(values))] / a_true)

    def rc_curve(
        self,
        snapshots: Sequence[Tuple[int, Volume]],
        masks: Mapping[float, Volume],
        a_true: float,
        algorithm: str,
        filtered: bool = False,
        gamma_id: str = "",
        provenance: Optional[Dict] = None,
    ) -> RCReport:
        """One RC row per sphere per snapshot, sorted by diameter descending then iteration"""
        rows: List[RCRow] = []
        for diameter, mask in masks.items():
            if not np.any(mask.values > 0):
                logger.warning(f"Sphere {diameter:g} mm covers no voxel center; skipped")
                continue
            for iteration, volume in snapshots:
                rows.append(
                    RCRow(
                        diameter_mm=diameter,
                        iteration=iteration,
                        algorithm=algorithm,
                        filtered=filtered,
                        gamma_id=gamma_id,
                        rc_max=self.rc_max(volume, mask, a_true),
                    )
                )
        return RCReport(rows=rows, provenance=dict(provenance or {})).sorted()

    def merge(self, reports: Iterable[RCReport], provenance: Optional[Dict] = None) -> RCReport:
        rows: List[RCRow] = []
        merged_prov: Dict = {}
        for report in reports:
            rows += report.rows
            merged_prov.update(report.provenance)
        merged_prov.update(provenance or {})
        return RCReport(rows=rows, provenance=merged_prov).sorted()

    def iteration_spread(
        self,
        report: RCReport,
        diameter: float,
        algorithm: Optional[str] = None,
        filtered: Optional[bool] = None,
        gamma_id: Optional[str] = None,
    ) -> float:
        """max - min of RC_max over the iterations of one sphere and variant"""
        rows = report.select(diameter, algorithm, filtered, gamma_id)
        variants = {r.key() for r in rows}
        if len(variants) > 1:
            raise create_error(
                InvalidParameterError,
                ErrorMessages.INVALID_PARAMETER_VALUE.format(param="variant", reason=f"ambiguous, matches {sorted(variants)}"),
                field="variant",
            )
        if len({r.iteration for r in rows}) < 2:
            raise create_error(
                InvalidParameterError,
                ErrorMessages.INVALID_PARAMETER_VALUE.format(
                    param="report", reason=f"need >= 2 iterations for the {diameter:g} mm sphere"
                ),
                field="report",
            )
        values = [r.rc_max for r in rows]
        return float(max(values) - min(values))

    def iterations_to_recovery(
        self,
        report: RCReport,
        diameter: float,
        low: float = 0.9,
        high: float = 1.1,
        **variant,
    ) -> Optional[int]:
        """First iteration with RC_max inside [low, high], None if never"""
        rows = sorted(report.select(diameter, **variant), key=lambda r: r.iteration)
        for r in rows:
            if low <= r.rc_max <= high:
                return r.iteration
        return None

    def common_recovery_iteration(
        self,
        report: RCReport,
        diameters: Sequence[float],
        low: float = 0.85,
        high: float = 1.15,
        **variant,
    ) -> Optional[int]:
        """First iteration at which every listed sphere has RC_max inside [low, high]"""
        for iteration in report.iterations():
            inside = []
            for d in diameters:
                rows = [r for r in report.select(d, **variant) if r.iteration == iteration]
                inside.append(bool(rows) and all(low <= r.rc_max <= high for r in rows))
            if all(inside):
                return iteration
        return None

    def extract_profile(self, vol: Volume, truth: Volume, center_mm: Sequence[float], label: str = "") -> ProfileRecord:
        """
        Values along the x-direction voxel row through the voxel nearest to center_mm
        """
        if vol.grid != truth.grid:
            raise create_error(
                InvalidParameterError,
                ErrorMessages.GRID_MISMATCH.format(left=vol.grid.model_dump(), right=truth.grid.model_dump()),
            )
        _, j, k = vol.grid.index_of(center_mm)
        xs, _, _ = vol.grid.axis_coordinates()
        return ProfileRecord(
            axis="x",
            fixed_indices={"j": j, "k": k},
            indices=list(range(vol.grid.nx)),
            positions_mm=[float(x) for x in xs],
            reconstructed=[float(v) for v in vol.values[k, j, :]],
            truth=[float(v) for v in truth.values[k, j, :]],
            label=label,
        )

    # -- CSV ----------------------------------------------------------------------

    def report_to_csv(self, report: RCReport) -> str:
        buffer = io.StringIO()
        for key in sorted(report.provenance):
            buffer.write(f"# {key}={json.dumps(report.provenance[key], sort_keys=True)}\n")
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(RC_COLUMNS)
        for r in report.rows:
            writer.writerow([repr(r.diameter_mm), r.iteration, r.algorithm, int(r.filtered), r.gamma_id, repr(r.rc_max)])
        return buffer.getvalue()

    def report_from_csv(self, text: str) -> RCReport:
        provenance: Dict = {}
        body: List[str] = []
        for line in text.splitlines():
            if line.startswith("# "):
                key, _, value = line[2:].partition("=")
                provenance[key] = json.loads(value)
            elif line:
                body.append(line)
        reader = csv.DictReader(body)
        rows = [
            RCRow(
                diameter_mm=float(rec["diameter_mm"]),
                iteration=int(rec["iteration"]),
                algorithm=rec["algorithm"],
                filtered=bool(int(rec["filtered"])),
                gamma_id=rec["gamma_id"],
                rc_max=float(rec["rc_max"]),
            )
            for rec in reader
        ]
        return RCReport(rows=rows, provenance=provenance)

    def write_report(self, report: RCReport, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.report_to_csv(report))
        logger.info(f"Wrote {len(report.rows)} RC rows to {path}")
        return path

    def read_report(self, path: PathLike) -> RCReport:
        return self.report_from_csv(Path(path).read_text())

    def write_profiles(self, profiles: Sequence[ProfileRecord], path: PathLike) -> Path:
        """Long-format CSV: label, index, position_mm, reconstructed, truth"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(("label", "axis", "j", "k", "index", "position_mm", "reconstructed", "truth"))
        for p in profiles:
            for i, x, rec, tru in zip(p.indices, p.positions_mm, p.reconstructed, p.truth):
                writer.writerow((p.label, p.axis, p.fixed_indices["j"], p.fixed_indices["k"], i, repr(x), repr(rec), repr(tru)))
        path.write_text(buffer.getvalue())
        return path

    # -- stage ------------------------------------------------------------------

    def load_snapshots(self, snapshot_dir: PathLike) -> List[Tuple[int, Volume]]:
        """iter_NNN volumes of a reconstruction directory, by iteration"""
        snapshots = []
        for sidecar in sorted(Path(snapshot_dir).glob("iter_*.json")):
            volume = read_volume(sidecar)
            snapshots.append((int(volume.metadata.get("iteration", sidecar.stem.split("_")[-1])), volume))
        if not snapshots:
            raise FileNotFoundError(2, "No iter_*.json snapshots", str(snapshot_dir))
        return sorted(snapshots, key=lambda item: item[0])

    def run_stage(
        self,
        snapshot_dir: PathLike,
        phantom_dir: PathLike,
        out_dir: PathLike,
        tag: str,
        result_path: Optional[PathLike] = None,
        profile_diameters: Sequence[float] = (),
        provenance: Optional[Dict] = None,
    ) -> Tuple[List[Path], RCReport]:
        """
        RC report and line profiles of one reconstruction directory

        Writes rc_<tag>.csv and profiles_<tag>.csv into out_dir.
        """
        snapshot_dir, phantom_dir, out_dir = Path(snapshot_dir), Path(phantom_dir), Path(out_dir)
        result = json.loads(Path(result_path or snapshot_dir / "result.json").read_text())
        params = result["params"]
        scale = float(result.get("scale", 1.0))
        spec = PhantomSpec.model_validate_json((phantom_dir / "phantom_spec.json").read_text())
        truth = read_volume(phantom_dir / "activity")
        snapshots = self.load_snapshots(snapshot_dir)
        filtered = "filter" in snapshots[0][1].metadata

        gamma_id = params.get("gamma_map_id") or (repr(params["gamma"]) if params.get("gamma") is not None else "")
        report = self.rc_curve(
            snapshots,
            phantom_service.sphere_masks(spec, truth.grid),
            spec.sphere_activity * scale,
            algorithm=params["algorithm"],
            filtered=filtered,
            gamma_id=gamma_id,
            provenance={**(provenance or {}), "scale": scale, "seed": result.get("seed"), "variant": tag},
        )
        paths = [self.write_report(report, out_dir / f"rc_{tag}.csv")]

        scaled_truth = truth.with_values(truth.values * scale)
        profiles = []
        for d in profile_diameters:
            center = spec.sphere_centers[phantom_service.sphere_index(spec, d)]
            for iteration, volume in snapshots:
                profiles.append(self.extract_profile(volume, scaled_truth, center, label=f"{d:g}mm n={iteration}"))
        if profiles:
            paths.append(self.write_profiles(profiles, out_dir / f"profiles_{tag}.csv"))
        return paths, report

    def read_profiles(self, path: PathLike) -> Dict[str, Dict[str, List[float]]]:
        """label -> {'index', 'reconstructed', 'truth'} series"""
        series: Dict[str, Dict[str, List[float]]] = {}
        with open(path, newline="") as f:
            for rec in csv.DictReader(f):
                entry = series.setdefault(rec["label"], {"index": [], "reconstructed": [], "truth": []})
                entry["index"].append(int(rec["index"]))
                entry["reconstructed"].append(float(rec["reconstructed"]))
                entry["truth"].append(float(rec["truth"]))
        return series

    def build_report(
        self,
        analysis_dir: PathLike,
        phantom_dir: PathLike,
        recon_dirs: Mapping[str, PathLike],
        out_dir: PathLike,
        rc_window: Sequence[float] = (0.9, 1.1),
        local_window: Sequence[float] = (0.85, 1.15),
        formats: Sequence[str] = ("csv", "svg", "png"),
    ) -> List[Path]:
        """Figures, slice previews and summary.json from the analysis outputs"""
        analysis_dir, out_dir = Path(analysis_dir), Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths: List[Path] = []
        summary: Dict[str, Dict] = {}

        for csv_path in sorted(analysis_dir.glob("rc_*.csv")):
            tag = csv_path.stem[len("rc_"):]
            report = self.read_report(csv_path)
            entry: Dict = {"provenance": report.provenance, "recovery_iteration": {}, "iteration_spread": {}}
            for d in report.diameters():
                entry["recovery_iteration"][repr(d)] = self.iterations_to_recovery(report, d, rc_window[0], rc_window[1])
                if len(report.select(d)) >= 2:
                    entry["iteration_spread"][repr(d)] = self.iteration_spread(report, d)
            large = [d for d in report.diameters() if d >= 17.0]
            entry["common_recovery_iteration"] = self.common_recovery_iteration(report, large, local_window[0], local_window[1])
            summary[tag] = entry

            if "svg" in formats:
                curves = {
                    f"n={it}": {r.diameter_mm: r.rc_max for r in report.rows if r.iteration == it}
                    for it in report.iterations()
                }
                paths.append(plotting.plot_rc_curves(curves, out_dir / f"rc_{tag}.svg", title=tag, band=rc_window))
                profile_path = analysis_dir / f"profiles_{tag}.csv"
                if profile_path.exists():
                    for label_prefix, group in self._group_profiles(self.read_profiles(profile_path)).items():
                        first = next(iter(group.values()))
                        paths.append(
                            plotting.plot_profiles(
                                first["index"],
                                first["truth"],
                                {label: s["reconstructed"] for label, s in group.items()},
                                out_dir / f"profile_{tag}_{label_prefix}.svg",
                                title=f"{tag}, {label_prefix}",
                            )
                        )

        if "svg" in formats and recon_dirs:
            traces = {}
            for name, recon_dir in sorted(recon_dirs.items()):
                result_path = Path(recon_dir) / "result.json"
                if result_path.exists():
                    trace = json.loads(result_path.read_text()).get("loglik_trace", [])
                    traces[name] = [value for _, value in trace]
            if any(traces.values()):
                paths.append(plotting.plot_loglik(traces, out_dir / "loglik.svg"))

        if "png" in formats:
            phantom_dir = Path(phantom_dir)
            spec = PhantomSpec.model_validate_json((phantom_dir / "phantom_spec.json").read_text())
            truth = read_volume(phantom_dir / "activity")
            _, _, k = truth.grid.index_of(spec.sphere_centers[0])
            paths.append(save_slice_png(truth, k, out_dir / "slice_truth.png"))
            for name, recon_dir in sorted(recon_dirs.items()):
                iteration, final = self.load_snapshots(recon_dir)[-1]
                paths.append(save_slice_png(final, k, out_dir / f"slice_{name}_n{iteration:03d}.png"))

        summary_path = out_dir / "summary.json"
        summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True))
        paths.append(summary_path)
        return paths

    def _group_profiles(self, series: Dict[str, Dict[str, List[float]]]) -> Dict[str, Dict[str, Dict[str, List[float]]]]:
        groups: Dict[str, Dict[str, Dict[str, List[float]]]] = {}
        for label, s in series.items():
            sphere, _, rest = label.partition(" ")
            groups.setdefault(sphere, {})[rest or label] = s
        return groups


# Create a singleton instance
analysis_service = AnalysisService()

rc_max = analysis_service.rc_max
rc_curve = analysis_service.rc_curve
iteration_spread = analysis_service.iteration_spread
extract_profile = analysis_service.extract_profile
iterations_to_recovery = analysis_service.iterations_to_recovery
common_recovery_iteration = analysis_service.common_recovery_iteration
