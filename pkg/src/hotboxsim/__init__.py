"""Desk-scale simulator of a temperature-controlled 802.15.4 testbed.

Modules:
    phy           framing, spreading, O-QPSK modulation, MSK-style detection
    impairments   temperature-dependent link budget, AWGN, calibration
    thermal       chamber plant, anti-overshoot controller, schedules
    orchestrator  experiment protocol, packet records, trace files
    analysis      bit/nibble error statistics, link summaries, CSV export
    cli           command line entry point
"""

__version__ = "0.1.0"
