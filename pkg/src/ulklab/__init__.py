"""Laboratory for class-level unlearning label-leakage attacks.

Trains small classifiers, applies five unlearning algorithms (retrain,
fine-tune, random-label, amnesiac, negative-gradient), then infers which
classes were forgotten via parameter-space attacks and model-inversion
attacks, reporting Attack Success Rate.
"""

__version__ = "0.1.0"
