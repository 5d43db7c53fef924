# packages/__init__.py

# One module per stage of the laboratory; laboratory.py wires them together.
