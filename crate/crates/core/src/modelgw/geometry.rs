use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("depth grid is empty")]
    EmptyGrid,
    #[error("depth grid has {got} values, expected {width}x{height}")]
    ShapeMismatch { width: usize, height: usize, got: usize },
    #[error("every depth value is invalid")]
    AllInvalid,
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fx.is_finite() && self.fy > 0.0 && self.fy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics("principal point must be finite".into()));
        }
        Ok(())
    }
}

/// Row-major depth grid in meters; values `<= 0` (or non-finite) are invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::EmptyGrid);
        }
        if data.len() != width * height {
            return Err(GeometryError::ShapeMismatch { width, height, got: data.len() });
        }
        Ok(Self { width, height, data })
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }
}

/// One point per valid pixel in row-major order.
pub fn backproject_depth(
    depth: &DepthMap,
    k: &CameraIntrinsics,
) -> Result<Vec<[f64; 3]>, GeometryError> {
    k.validate()?;
    if depth.width == 0 || depth.height == 0 || depth.data.is_empty() {
        return Err(GeometryError::EmptyGrid);
    }
    if depth.data.len() != depth.width * depth.height {
        return Err(GeometryError::ShapeMismatch {
            width: depth.width,
            height: depth.height,
            got: depth.data.len(),
        });
    }
    let points: Vec<[f64; 3]> = depth
        .data
        .iter()
        .enumerate()
        .filter(|(_, d)| **d > 0.0 && d.is_finite())
        .map(|(i, &d)| {
            let u = (i % depth.width) as f64;
            let v = (i / depth.width) as f64;
            [(u - k.cx) * d / k.fx, (v - k.cy) * d / k.fy, d]
        })
        .collect();
    if points.is_empty() {
        return Err(GeometryError::AllInvalid);
    }
    Ok(points)
}

/// Pixel coordinates `(u, v)` of a camera-frame point; `None` behind the camera.
pub fn project_point(p: [f64; 3], k: &CameraIntrinsics) -> Option<(f64, f64)> {
    let [x, y, z] = p;
    (z > 0.0).then(|| (k.fx * x / z + k.cx, k.fy * y / z + k.cy))
}
