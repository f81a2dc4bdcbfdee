"""Temperature scaling of joint distributions for small generative models.

Finetunes likelihood-based models to sample from temperature-scaled joint
distributions, with an exact enumeration oracle that verifies every
checkable claim at desk scale.
"""

__version__ = "0.1.0"
