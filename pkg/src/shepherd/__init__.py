"""Static binary rewriting of 32-bit PE kernel drivers with a runtime
control-transfer monitor, plus an emulated sandbox to exercise both."""

__version__ = "0.1.0"
