"""Text-guided ECG digital-twin generation with a vector-quantized feature separator."""

__version__ = "0.1.0"

LABELS = ("NORM", "MI", "STTC", "CD", "HYP")
LEAD_NAMES = ("I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6")
