"""Direct speech-to-SQL parsing at desk scale.

Library layout:

- ``autodiff``   reverse-mode tape engine, Adam, checkpoint container
- ``reprogram``  acoustic re-programming of waveforms (rhythm/pitch/formant/EQ/energy)
- ``grammar``    SQL subset grammar, AST <-> action-sequence bijection, parser/renderer
- ``schema``     database schemas, question-schema linking, relation matrices
- ``features``   binary feature-file container and sequences
- ``synth``      deterministic synthetic corpus generator and manifests
- ``model``      speech/schema encoders, relation-aware transformer, tree decoder
- ``train``      training loop with adversarial speaker head
- ``metrics``    exact-match and component-matching evaluation
- ``cli``        the ``speechsql`` command line entry point
"""

__version__ = "0.1.0"
