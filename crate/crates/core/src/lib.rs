pub mod numerics;
pub mod synthvideo;
pub mod architecture;
pub mod training;
pub mod pipeline;
pub mod diagnostics;
