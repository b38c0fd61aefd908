"""Cross-modal ECG/PPG masked autoencoder on a small numpy autodiff engine."""
from ._accel import keep_heap_mapped

keep_heap_mapped()

__version__ = "0.1.0"
