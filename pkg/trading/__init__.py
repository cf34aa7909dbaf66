"""Spectrum trading between virtual optical networks embedded in an EON."""
