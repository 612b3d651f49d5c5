"""Ghost-Gutzwiller quantum-classical embedding simulator."""

__version__ = "0.1.0"
