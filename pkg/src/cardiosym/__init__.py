"""ECG screening toolkit: wavelet features, an attention network with a
Normal/Abnormal gate and five-way disease head, and a rule-based clinical
report layer."""

__version__ = "0.1.0"
