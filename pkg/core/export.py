from __future__ import annotations

import io
import os
import platform
import tempfile
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from config import APP_NAME, VERSION, PipelineConfig
from core.logger import get_logger
from core.metrics import MetricReport
from core.pipeline import LOSS_COLUMNS, AlignmentResult
from core.utils import atomic_write_bytes, stable_digest, write_csv, write_json

log = get_logger(__name__)

plt = None  # matplotlib.pyplot, imported on first plot

RESULT_FILES = (
    "deformed_coords.csv",
    "rigid_transform.json",
    "embeddings_ref.csv",
    "embeddings_src.csv",
    "losses.csv",
    "report.json",
    "alignment.svg",
)
REF_COLOR = "#1f77b4"
SRC_COLOR = "#d62728"


def _ensure_matplotlib() -> None:
    global plt
    if plt is not None:
        return
    import matplotlib

    if "MPLCONFIGDIR" not in os.environ:
        tmp = Path(tempfile.gettempdir()) / f"{APP_NAME}_mpl"
        tmp.mkdir(parents=True, exist_ok=True)
        os.environ["MPLCONFIGDIR"] = str(tmp)
    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as _plt

    plt = _plt


def versions() -> Dict[str, str]:
    import ot
    import scipy
    import sklearn

    return {
        APP_NAME: VERSION,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "scikit-learn": sklearn.__version__,
        "pot": ot.__version__,
    }


def points_frame(ids: Sequence[str], points: np.ndarray, labels: Optional[Sequence] = None) -> pd.DataFrame:
    frame = pd.DataFrame({"id": list(ids), "x": points[:, 0], "y": points[:, 1]})
    if labels is not None:
        frame["label"] = list(labels)
    return frame


def embeddings_frame(ids: Sequence[str], emb: np.ndarray) -> pd.DataFrame:
    frame = pd.DataFrame(emb, columns=[f"e{i}" for i in range(emb.shape[1])])
    frame.insert(0, "id", list(ids))
    return frame


def losses_frame(history: List[Dict[str, float]]) -> pd.DataFrame:
    frame = pd.DataFrame(history, columns=list(LOSS_COLUMNS))
    return frame.astype({"phase": int, "epoch": int})


def report_payload(
    report: Optional[MetricReport],
    cfg: PipelineConfig,
    runtime_s: float,
    rigid_report: Optional[MetricReport] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    payload: Dict[str, Any] = report.to_dict() if report is not None else {}
    config = cfg.to_dict()
    config.pop("paths", None)
    payload.update(
        config=config,
        config_digest=stable_digest(config),
        seed=cfg.seed,
        runtime_s=round(runtime_s, 3),
        versions=versions(),
    )
    if rigid_report is not None:
        payload["rigid_only"] = rigid_report.to_dict()
    if extra:
        payload.update(extra)
    return payload


def render_overlay_svg(
    ref: np.ndarray, before: np.ndarray, after: np.ndarray, title: str = "alignment"
) -> bytes:
    """Two panels (rigid only, deformed), reference and source points overlaid."""
    _ensure_matplotlib()
    plt.rcParams["svg.hashsalt"] = APP_NAME
    fig, axes = plt.subplots(1, 2, figsize=(10, 5), sharex=True, sharey=True)
    size = max(2.0, 12.0 - np.log10(max(len(ref), 10)) * 3.0)
    for ax, pts, name in ((axes[0], before, "rigid"), (axes[1], after, "deformed")):
        ax.scatter(ref[:, 0], ref[:, 1], s=size, c=REF_COLOR, alpha=0.6, linewidths=0, label="reference")
        ax.scatter(pts[:, 0], pts[:, 1], s=size, c=SRC_COLOR, alpha=0.6, linewidths=0, label="source")
        ax.set_title(f"{title}: {name}")
        ax.set_aspect("equal", adjustable="datalim")
    axes[0].legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    return buf.getvalue()


def write_result(result: AlignmentResult, out_dir: Path, cfg: PipelineConfig, ref_coords: np.ndarray) -> List[Path]:
    """Persist an AlignmentResult; every file is written atomically."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [
        write_csv(out_dir / "deformed_coords.csv", points_frame(result.src_ids, result.deformed_coords)),
        write_json(out_dir / "rigid_transform.json", {
            "normalized_frame": result.rigid.to_dict(),
            "source_scaler": result.src_scaler.to_dict(),
            "reference_scaler": result.ref_scaler.to_dict(),
            "icp": result.icp.to_dict(),
        }),
        write_csv(out_dir / "embeddings_ref.csv", embeddings_frame(result.ref_ids, result.embeddings_ref)),
        write_csv(out_dir / "embeddings_src.csv", embeddings_frame(result.src_ids, result.embeddings_src)),
        write_csv(out_dir / "losses.csv", losses_frame(result.loss_history)),
        write_json(out_dir / "report.json", report_payload(
            result.report, cfg, result.runtime_s, result.rigid_report,
            {
                "match_state": result.match_state.to_dict(),
                "checkpoints": [p.name for p in result.checkpoint_paths],
                "epochs_run": len(result.loss_history),
            },
        )),
        atomic_write_bytes(
            out_dir / "alignment.svg",
            render_overlay_svg(ref_coords, result.rigid_coords, result.deformed_coords),
        ),
    ]
    log.info("Wrote %d result files to %s", len(written), out_dir)
    return written
