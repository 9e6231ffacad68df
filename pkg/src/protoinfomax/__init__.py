"""Few-shot in-domain text classification with zero-shot out-of-domain detection.

Prototypical sentence encoders trained to maximize a binary cross-entropy
lower bound on the mutual information between class prototypes and
queries, so that one model both classifies in-domain inputs and scores
out-of-domain ones low.  Subpackages cover corpus handling, lexical
features, a small autodiff engine with a fused recurrence kernel, the
encoder, the objectives, episodic training, thresholded evaluation with
calibration, and a command line front end.
"""

__version__ = "0.1.0"
