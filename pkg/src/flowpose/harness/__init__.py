"""File I/O, synthetic sequences, evaluation metrics and the command line."""
