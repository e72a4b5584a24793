//! Monotonic neural transducer training toolkit.

pub mod ctc;
pub mod dataio;
pub mod decoder;
pub mod lm;
pub mod losses;
pub mod mbr;
pub mod model;
pub mod numeric;
pub mod optim;
pub mod oracle;
pub mod pipeline;
pub mod topology;
