from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, Field, model_validator

# Column order of the RC report CSV
RC_COLUMNS = ("diameter_mm", "iteration", "algorithm", "filtered", "gamma_id", "rc_max")


class RCRow(BaseModel):
    """RC_max of one sphere in one snapshot of one variant"""
    diameter_mm: float = Field(..., gt=0)
    iteration: int = Field(..., ge=0)
    algorithm: str
    filtered: bool = False
    gamma_id: str = Field(default="", description="Scalar gamma as text, a gamma-map name, or empty")
    rc_max: float = Field(..., ge=0)

    def key(self) -> Tuple[str, bool, str]:
        """Variant identity"""
        return (self.algorithm, self.filtered, self.gamma_id)


class RCReport(BaseModel):
    """Recovery coefficients with provenance (config hash, seed, scale factor, filter settings)"""
    rows: List[RCRow] = Field(default_factory=list)
    provenance: Dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _unique_rows(self) -> "RCReport":
        seen = set()
        for row in self.rows:
            k = (row.diameter_mm, row.iteration) + row.key()
            if k in seen:
                raise ValueError(f"duplicate RC row for {k}")
            seen.add(k)
        return self

    def sorted(self) -> "RCReport":
        rows = sorted(self.rows, key=lambda r: (-r.diameter_mm, r.iteration, r.algorithm, r.filtered, r.gamma_id))
        return RCReport(rows=rows, provenance=self.provenance)

    def diameters(self) -> List[float]:
        return sorted({r.diameter_mm for r in self.rows}, reverse=True)

    def iterations(self) -> List[int]:
        return sorted({r.iteration for r in self.rows})

    def select(
        self,
        diameter: Optional[float] = None,
        algorithm: Optional[str] = None,
        filtered: Optional[bool] = None,
        gamma_id: Optional[str] = None,
    ) -> List[RCRow]:
        out = []
        for r in self.rows:
            if diameter is not None and abs(r.diameter_mm - diameter) > 1e-9:
                continue
            if algorithm is not None and r.algorithm != algorithm:
                continue
            if filtered is not None and r.filtered != filtered:
                continue
            if gamma_id is not None and r.gamma_id != gamma_id:
                continue
            out.append(r)
        return out


class ProfileRecord(BaseModel):
    """Paired reconstructed/truth values along one voxel row"""
    axis: str = Field(default="x")
    fixed_indices: Dict[str, int] = Field(..., description="Indices held fixed, e.g. {'j': 40, 'k': 46}")
    indices: List[int]
    positions_mm: List[float]
    reconstructed: List[float]
    truth: List[float]
    label: str = ""

    @model_validator(mode="after")
    def _equal_lengths(self) -> "ProfileRecord":
        n = len(self.indices)
        if not (len(self.positions_mm) == len(self.reconstructed) == len(self.truth) == n):
            raise ValueError("profile series must have equal length")
        return self
