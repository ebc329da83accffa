"""Streaming coincidence counting on time-tag data."""
from .kernels import BACKEND, available_backends, get_kernels
from .tags import (CHANNEL_NAMES, IDLER, SIGNAL1, SIGNAL2, BinaryTagWriter, TagStream, concatenate, iter_binary,
                   read_binary, read_tags, read_text, write_binary, write_tags, write_text)
from .counting import (CoincidenceHistogram, CountResult, G2cProfile, StreamCounter, count_stream,
                       delay_histogram, effective_tau_coin, g2c_from_counts, g2c_profile, peak_wall,
                       singles, triple_surface, window_ticks)

__all__ = [
    "BACKEND", "available_backends", "get_kernels",
    "CHANNEL_NAMES", "IDLER", "SIGNAL1", "SIGNAL2", "BinaryTagWriter", "TagStream", "concatenate", "iter_binary",
    "read_binary", "read_tags", "read_text", "write_binary", "write_tags", "write_text",
    "CoincidenceHistogram", "CountResult", "G2cProfile", "StreamCounter", "count_stream",
    "delay_histogram", "effective_tau_coin", "g2c_from_counts", "g2c_profile", "peak_wall",
    "singles", "triple_surface", "window_ticks",
]
