"""Two-stage variational bottleneck splitting of frozen sequence representations.

Stage 1 learns a compressed latent that keeps just what transcription needs;
stage 2, conditioned on those frozen textual latents, learns the task-relevant
acoustic residual. Probing and attribution utilities verify the split.
"""

__version__ = "0.1.0"
