from .pipeline import (
    EnhanceContext,
    Enhancement,
    EnhancementError,
    SampleRecord,
    UnresolvableReference,
    derive_ref_prompt,
    enhance_manifest,
    enhance_prompt,
    enhance_record,
    enhance_reference,
    read_manifest,
    write_manifest,
)
from .providers import CopyImageGenerator, HTTPChatProvider, MockTextProvider, ProviderError, ProviderRequest, ProviderResponse, RetryPolicy
from .templates import build_ie_instruction, build_pe_instruction
from .validate import ValidationReport, validate_pe, validate_ref_prompt
