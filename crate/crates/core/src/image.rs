//! RGB image buffer shared by the data generator and the model.

/// Square RGB image, channel-major (`3 × size × size`), values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    size: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(size: usize, data: Vec<f64>) -> Option<Self> {
        (data.len() == 3 * size * size).then_some(Self { size, data })
    }

    pub fn filled(size: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * size * size);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, size * size));
        }
        Self { size, data }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.size + y) * self.size + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.size + y) * self.size + x] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(c, y, x, v);
        }
    }
}
