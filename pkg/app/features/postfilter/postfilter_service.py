from pathlib import Path
from typing import List, Optional, Union
import logging

import numpy as np
from scipy import fft

from app.core.config import config
from app.core.error_handlers import ErrorMessages, InvalidParameterError, create_error
from app.core.volume import Volume, VolumeRole
from app.core.volume_io import read_volume, write_volume
from .postfilter_schema import FilterParams, PadMode

logger = logging.getLogger(__name__)


def radial_frequency(shape, pitch: float, real: bool = False) -> np.ndarray:
    """|nu| (cycles/mm) on the DFT lattice of an array of the given (z, y, x) shape"""
    nz, ny, nx = shape
    fz = fft.fftfreq(nz, d=pitch)
    fy = fft.fftfreq(ny, d=pitch)
    fx = fft.rfftfreq(nx, d=pitch) if real else fft.fftfreq(nx, d=pitch)
    return np.sqrt(fz[:, None, None] ** 2 + fy[None, :, None] ** 2 + fx[None, None, :] ** 2)


class PostfilterService:
    """Frequency-domain Butterworth smoothing of reconstructed volumes"""

    def __init__(self, workers: Optional[int] = None):
        self._workers = workers

    @property
    def workers(self) -> int:
        return self._workers or config.THREADS

    def filter_gain(self, params: FilterParams, nu: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
        """|H(nu)| = 1 / sqrt(1 + (nu / cutoff)^(2p))"""
        nu_arr = np.asarray(nu, dtype=np.float64)
        if np.any(nu_arr < 0):
            raise create_error(
                InvalidParameterError,
                ErrorMessages.INVALID_PARAMETER_VALUE.format(param="nu", reason="frequency must be >= 0"),
                field="nu",
            )
        with np.errstate(over="ignore"):
            gain = 1.0 / np.sqrt(1.0 + (nu_arr / params.cutoff) ** (2.0 * params.order))
        return float(gain) if gain.ndim == 0 else gain

    def _check_cutoff(self, params: FilterParams, pitch: float) -> None:
        nyquist = 1.0 / (2.0 * pitch)
        if params.cutoff > nyquist * (1 + 1e-12):
            raise create_error(
                InvalidParameterError,
                ErrorMessages.PARAMETER_OUT_OF_RANGE.format(param="cutoff", min_val=0, max_val=nyquist),
                details={"provided_value": params.cutoff, "pitch": pitch},
                field="cutoff",
            )

    def butterworth_3d(self, vol: Volume, params: FilterParams) -> Volume:
        """
        Multiply the volume's spectrum by H(|nu|)

        Periodic mode filters the plain DFT, so constants and the mean are preserved exactly.
        Zero mode pads pad_voxels zeros per side first and crops afterwards.
        """
        self._check_cutoff(params, vol.grid.pitch)
        if not params.enabled:
            return vol
        values = vol.values
        pad = params.pad_voxels if params.pad_mode == PadMode.ZERO else 0
        if pad:
            values = np.pad(values, pad, mode="constant", constant_values=0.0)

        spectrum = fft.rfftn(values, workers=self.workers)
        spectrum *= self.filter_gain(params, radial_frequency(values.shape, vol.grid.pitch, real=True))
        out = fft.irfftn(spectrum, s=values.shape, workers=self.workers)
        if pad:
            out = out[pad:-pad, pad:-pad, pad:-pad]

        return Volume(
            vol.grid,
            out,
            VolumeRole.GENERIC if np.any(out < 0) else vol.role,
            {**vol.metadata, "filter": params.model_dump(mode="json")},
        )

    def high_frequency_energy(self, vol: Volume, band: float) -> float:
        """Spectral energy (Parseval-normalized) above radial frequency band (cycles/mm)"""
        spectrum = fft.fftn(vol.values, workers=self.workers)
        nu = radial_frequency(vol.values.shape, vol.grid.pitch)
        return float(np.sum(np.abs(spectrum[nu > band]) ** 2) / vol.values.size)

    def run_stage(self, inputs: List[Path], params: FilterParams, out_dir: Path) -> List[Path]:
        out_dir = Path(out_dir)
        paths: List[Path] = []
        for path in inputs:
            vol = read_volume(path)
            filtered = self.butterworth_3d(vol, params)
            paths += write_volume(out_dir / Path(path).name.removesuffix(".json"), filtered)
        logger.info(f"Filtered {len(inputs)} volume(s) with p={params.order:g}, cutoff={params.cutoff:g}/mm")
        return paths


# Create a singleton instance
postfilter_service = PostfilterService()

filter_gain = postfilter_service.filter_gain
butterworth_3d = postfilter_service.butterworth_3d
high_frequency_energy = postfilter_service.high_frequency_energy
