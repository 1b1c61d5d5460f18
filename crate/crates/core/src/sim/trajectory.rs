use std::io::Write;

use super::RigidBodyState;

/// One `(env, step)` record of a trajectory dump.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub env: usize,
    pub step: usize,
    pub state: RigidBodyState,
    pub command: Vec<f64>,
    pub reward: f64,
}

/// CSV trajectory writer.
///
/// Header: `env,step,px,py,pz,vx,vy,vz,qw,qx,qy,qz,wx,wy,wz,u0..u{n-1},reward`,
/// where `u` are the commanded thrusts in newtons.
pub struct TrajectoryWriter<W: Write> {
    inner: csv::Writer<W>,
    motor_count: usize,
}

impl<W: Write> TrajectoryWriter<W> {
    pub fn new(out: W, motor_count: usize) -> csv::Result<Self> {
        let mut inner = csv::Writer::from_writer(out);
        let mut header: Vec<String> =
            ["env", "step", "px", "py", "pz", "vx", "vy", "vz", "qw", "qx", "qy", "qz", "wx", "wy", "wz"]
                .iter()
                .map(|s| s.to_string())
                .collect();
        header.extend((0..motor_count).map(|i| format!("u{i}")));
        header.push("reward".into());
        inner.write_record(&header)?;
        Ok(Self { inner, motor_count })
    }

    pub fn write(&mut self, row: &TrajectoryRow) -> csv::Result<()> {
        let s = &row.state;
        let q = s.q.quaternion();
        let mut rec = vec![row.env.to_string(), row.step.to_string()];
        let nums = s.p.iter().chain(s.v.iter()).copied().chain([q.w, q.i, q.j, q.k]).chain(s.omega.iter().copied());
        rec.extend(nums.map(|x| x.to_string()));
        rec.extend((0..self.motor_count).map(|i| row.command.get(i).copied().unwrap_or(f64::NAN).to_string()));
        rec.push(row.reward.to_string());
        self.inner.write_record(&rec)
    }

    pub fn finish(mut self) -> csv::Result<W> {
        self.inner.flush()?;
        self.inner.into_inner().map_err(|e| e.into_error().into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_row() {
        let mut w = TrajectoryWriter::new(Vec::new(), 4).unwrap();
        w.write(&TrajectoryRow {
            env: 1,
            step: 2,
            state: RigidBodyState::at_rest(4),
            command: vec![1.0, 2.0, 3.0, 4.0],
            reward: 0.5,
        })
        .unwrap();
        let text = String::from_utf8(w.finish().unwrap()).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "env,step,px,py,pz,vx,vy,vz,qw,qx,qy,qz,wx,wy,wz,u0,u1,u2,u3,reward"
        );
        assert_eq!(lines.next().unwrap(), "1,2,0,0,0,0,0,0,1,0,0,0,0,0,0,1,2,3,4,0.5");
    }
}
