"""mmWave beam tracking simulator: geometric channels, DFT beam gains, LSTM
beam prediction and measurement-substitution schedules."""

__version__ = "0.1.0"
