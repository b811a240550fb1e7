from .aggregate import gaussian_prompt_aggregate, gaussian_weights
from .methods import (
    PROMPT_METHODS,
    ClassifierBank,
    ClassTokens,
    PromptSRCOutputs,
    build_zeroshot_classifier,
    class_tokens,
    classifier,
    cocoop_forward,
    coop_forward,
    coop_init,
    forward,
    init_state,
    maple_forward,
    promptsrc_forward,
    promptsrc_loss,
    textual_diversity_targets,
    training_loss,
    zeroshot_logits,
)
from .state import METHODS, MethodConfig, PromptState, load_templates
