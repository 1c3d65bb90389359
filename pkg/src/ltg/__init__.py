"""Layout-to-generator conversion assistant.

Parses hierarchical GDSII layouts, rasterizes sub-cells into layer-channel
image stacks, classifies each design against a library of layout generators
with a multi-scale CNN, and drives a suggestion/approval workflow that turns
an accepted assignment into a generator-call skeleton.
"""

__version__ = "0.1.0"
