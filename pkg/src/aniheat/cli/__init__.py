"""Command line interface (``aniheat solve | net | verify``)."""
