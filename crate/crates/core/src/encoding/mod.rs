//! Template construction and the toy encoder.

mod encoder;
mod template;

pub use encoder::{
    description_template, token_id, Channel, EncoderConfig, EncoderInterface, ForwardCache, Layout, ModelState,
    CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
pub use template::{
    build_description_template, build_template, PromptConfig, Segment, Slot, SlotKind, TemplateSequence,
    NUM_SEGMENTS,
};
