"""retouchkit: a perception-reasoning-action retouching loop for
AI-generated images, with native saliency/text/policy-objective math and
pluggable model providers (deterministic mocks included)."""

__version__ = "0.1.0"
