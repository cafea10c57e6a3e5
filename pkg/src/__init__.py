"""Edge ASR toolkit: corpus filtering, low-rank compression, FLOP accounting and on-device benchmarks"""

__version__ = "0.1.0"
