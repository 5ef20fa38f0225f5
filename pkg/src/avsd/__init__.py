"""Target-speaker lipreading toolkit: audio-visual self-distillation
pretraining, hybrid CTC/attention fine-tuning, KLD-regularized speaker
adaptation and lip/face ensemble decoding on a synthetic corpus."""

__version__ = "0.1.0"
