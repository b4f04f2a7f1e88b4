pub mod attacks;
pub mod diffmath;
pub mod eval;
pub mod eventcam;
pub mod geom;
pub mod losses;
pub mod tracker;
