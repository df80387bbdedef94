"""Feature extraction companion for the adc toolkit.

Encodes collected images with a vision backbone into the core's binary
embedding container, and exports early-stopped linear-head confidences as
probability containers. Talks to the core only through its documented file
formats.
"""

__version__ = "0.1.0"
