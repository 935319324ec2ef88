pub mod audio;
pub mod bgm;
pub mod duplex;
pub mod ensemble;
pub mod fixtures;
pub mod flags;
pub mod metrics;
pub mod overlap;
pub mod pipeline;
pub mod protocol;
pub mod timeline;
pub mod vad;
