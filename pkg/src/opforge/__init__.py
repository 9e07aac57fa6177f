"""opforge: fragment-seeded molecule generation with built-in drug-likeness scoring."""

__version__ = "0.1.0"
