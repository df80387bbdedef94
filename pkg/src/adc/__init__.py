"""Dataset construction and curation toolkit.

Submodules: taxonomy (design + queries), collector (acquisition),
embedstore (binary features + k-NN), curator (noise detection/relabeling),
votes (crowd aggregation), evalkit (metrics), subsetter (derived datasets),
pipeline/cli (orchestration).
"""

__version__ = "0.1.0"
