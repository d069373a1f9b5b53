"""Human-in-the-loop object clustering without a distance function.

Pages of objects are sampled on a logarithmic budget, crowd workers group
the objects on each page with a color palette, a Bayesian aggregation model
recovers clusters (estimating their count dynamically), and cluster quality
is measured with intruder tasks.
"""

__version__ = "0.1.0"
