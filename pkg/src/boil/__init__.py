"""Learning patrolling edge distributions from visibility, and simulating them."""

__version__ = "0.1.0"
