use std::io::{self, Write};

pub const METRICS_HEADER: &str =
    "step,reward,critic_loss_1,critic_loss_2,actor_loss,r_lambda,r_mu,V_proxy,feasible_vm,feasible_slack";

/// One row per environment step. Fields that had no update yet are `None`
/// and written as empty cells.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub reward: f64,
    pub critic_loss_1: Option<f64>,
    pub critic_loss_2: Option<f64>,
    pub actor_loss: Option<f64>,
    pub r_lambda: Option<f64>,
    pub r_mu: Option<f64>,
    pub v_proxy: Option<f64>,
    pub feasible_vm: bool,
    pub feasible_slack: bool,
}

fn cell(x: Option<f64>) -> String {
    x.map(|v| format!("{v:e}")).unwrap_or_default()
}

pub fn write_metrics_csv(rows: &[MetricsRow], out: &mut impl Write) -> io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{:e},{},{},{},{},{},{},{},{}",
            r.step,
            r.reward,
            cell(r.critic_loss_1),
            cell(r.critic_loss_2),
            cell(r.actor_loss),
            cell(r.r_lambda),
            cell(r.r_mu),
            cell(r.v_proxy),
            r.feasible_vm as u8,
            r.feasible_slack as u8
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_cells_for_missing_values() {
        let row = MetricsRow {
            step: 3,
            reward: -1.5,
            critic_loss_1: None,
            critic_loss_2: Some(0.25),
            actor_loss: None,
            r_lambda: None,
            r_mu: None,
            v_proxy: None,
            feasible_vm: true,
            feasible_slack: false,
        };
        let mut buf = Vec::new();
        write_metrics_csv(&[row], &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().nth(1).unwrap(), "3,-1.5e0,,2.5e-1,,,,,1,0");
    }
}
