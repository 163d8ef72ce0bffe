"""Motion-corrected reconstruction of moving objects from consecutive CT scans."""
import os

# TBB is not available everywhere; the workqueue layer is and is deterministic
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")
