"""Fine-tuning adapter: consumes emitted training files, produces servable
student checkpoints. A file-boundary consumer of the pipeline package — the
contract is the training-file schema and the chat-completion wire protocol,
never imports."""

__version__ = "0.1.0"
