from .bundle import (
    ArchiveError,
    BackboneBundle,
    ContractError,
    EmbeddedPrompt,
    InvalidTokenError,
    convert_state_dict,
    l2_normalize,
    load_backbone,
    micro_backbone,
    save_backbone,
    similarity_logits,
)
from .model import BackboneGeometry, ClipModel, ConfigurationError
from .preprocess import PreprocessSpec
from .tokenizer import CONTEXT_LENGTH, BPETokenizer, FoldedTokenizer, TokenSequence, tokenize, tokenize_prompt
