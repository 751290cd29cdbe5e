"""Urban form, pedestrian heat stress and geographically weighted boosting."""

import warnings

# numba probes TBB on first parallel launch; the fallback layer is fine
warnings.filterwarnings("ignore", message="The TBB threading layer")

__version__ = "0.1.0"
