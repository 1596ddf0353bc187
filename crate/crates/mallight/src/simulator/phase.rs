//! Signal phases, turn movements and the movement conflict table.
//!
//! Approaches are named by the compass side the traffic comes from, so the
//! N approach carries vehicles heading south. Each approach has one lane
//! per movement (left, through, right), giving 12 incoming lanes per
//! intersection. The eight phases pair non-conflicting left/through
//! movements; right turns flow whenever their lane is unblocked.

/// Compass directions in clockwise order. Also used as the travel heading
/// of a vehicle, where `North` means "driving northward".
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    North = 0,
    East = 1,
    South = 2,
    West = 3,
}

pub const DIRECTIONS: [Direction; 4] = [
    Direction::North,
    Direction::East,
    Direction::South,
    Direction::West,
];

impl Direction {
    pub fn opposite(self) -> Direction {
        DIRECTIONS[(self as usize + 2) % 4]
    }

    fn rotate(self, quarter_turns_cw: i32) -> Direction {
        DIRECTIONS[(self as i32 + quarter_turns_cw).rem_euclid(4) as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Turn {
    Left = 0,
    Through = 1,
    Right = 2,
}

pub const TURNS: [Turn; 3] = [Turn::Left, Turn::Through, Turn::Right];

/// One (approach, turn) pair; the unit the signal controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Movement {
    pub approach: Direction,
    pub turn: Turn,
}

impl Movement {
    /// Dense index into the 12 incoming lanes: approach-major, L/T/R minor.
    pub fn lane_index(self) -> usize {
        self.approach as usize * 3 + self.turn as usize
    }

    pub fn from_lane_index(lane: usize) -> Movement {
        Movement {
            approach: DIRECTIONS[lane / 3],
            turn: TURNS[lane % 3],
        }
    }

    /// Compass side of the segment this movement exits onto. The vehicle
    /// arrives heading `approach.opposite()`; right turns rotate clockwise,
    /// left turns counterclockwise.
    pub fn exit_side(self) -> Direction {
        let heading = self.approach.opposite();
        match self.turn {
            Turn::Through => heading,
            Turn::Right => heading.rotate(1),
            Turn::Left => heading.rotate(-1),
        }
    }
}

/// Number of incoming (or outgoing) lanes per intersection.
pub const LANES: usize = 12;

/// A signal state: one of the eight green-pair phases, or the blackout
/// state a malfunctioning signal is forced into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Index(u8),
    MalfunctionOff,
}

pub const PHASE_COUNT: usize = 8;

/// The fixed 8-phase table: {NT+ST, EL+WL, ET+WT, NL+SL, NT+NL, ST+SL,
/// ET+EL, WT+WL}.
const PHASE_TABLE: [[(Direction, Turn); 2]; PHASE_COUNT] = {
    use Direction::*;
    use Turn::*;
    [
        [(North, Through), (South, Through)],
        [(East, Left), (West, Left)],
        [(East, Through), (West, Through)],
        [(North, Left), (South, Left)],
        [(North, Through), (North, Left)],
        [(South, Through), (South, Left)],
        [(East, Through), (East, Left)],
        [(West, Through), (West, Left)],
    ]
};

impl Phase {
    pub fn all() -> [Phase; PHASE_COUNT] {
        [0, 1, 2, 3, 4, 5, 6, 7].map(Phase::Index)
    }

    pub fn index(self) -> Option<u8> {
        match self {
            Phase::Index(i) => Some(i),
            Phase::MalfunctionOff => None,
        }
    }

    /// The two green left/through movements, or `None` when off.
    pub fn movements(self) -> Option<[Movement; 2]> {
        let i = self.index()? as usize;
        Some(PHASE_TABLE[i].map(|(approach, turn)| Movement { approach, turn }))
    }

    /// Whether a lane may discharge under this phase. Right turns always
    /// may; left/through lanes need their movement in the green pair.
    pub fn serves(self, movement: Movement) -> bool {
        if movement.turn == Turn::Right {
            return true;
        }
        self.movements()
            .map(|ms| ms.contains(&movement))
            .unwrap_or(false)
    }
}

/// Whether two movements crossing the intersection at the same time can
/// collide. Movements from the same approach never conflict, rights never
/// conflict, and opposing same-turn pairs (the classic paired phases) are
/// compatible; every other cross-approach left/through pair conflicts.
pub fn movements_conflict(a: Movement, b: Movement) -> bool {
    if a.approach == b.approach {
        return false;
    }
    if a.turn == Turn::Right || b.turn == Turn::Right {
        return false;
    }
    !(a.approach.opposite() == b.approach && a.turn == b.turn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use Direction::*;
    use Turn::*;

    fn m(approach: Direction, turn: Turn) -> Movement {
        Movement { approach, turn }
    }

    #[test]
    fn phase_pairs_never_conflict() {
        for phase in Phase::all() {
            let [a, b] = phase.movements().unwrap();
            assert!(!movements_conflict(a, b), "{phase:?}");
        }
    }

    #[test]
    fn crossing_movements_conflict() {
        assert!(movements_conflict(m(North, Through), m(East, Through)));
        assert!(movements_conflict(m(North, Through), m(South, Left)));
        assert!(movements_conflict(m(East, Left), m(North, Left)));
        assert!(!movements_conflict(m(North, Through), m(South, Through)));
        assert!(!movements_conflict(m(North, Right), m(East, Through)));
        assert!(!movements_conflict(m(North, Through), m(North, Left)));
    }

    #[test]
    fn exit_sides_follow_right_hand_turn_geometry() {
        // N approach drives south: through exits south, left exits east.
        assert_eq!(m(North, Through).exit_side(), South);
        assert_eq!(m(North, Left).exit_side(), East);
        assert_eq!(m(North, Right).exit_side(), West);
        assert_eq!(m(West, Through).exit_side(), East);
        assert_eq!(m(West, Left).exit_side(), North);
        assert_eq!(m(East, Right).exit_side(), North);
    }

    #[test]
    fn lane_indices_round_trip() {
        for lane in 0..LANES {
            assert_eq!(Movement::from_lane_index(lane).lane_index(), lane);
        }
    }

    #[test]
    fn off_phase_serves_nothing_but_rights() {
        assert!(Phase::MalfunctionOff.serves(m(North, Right)));
        assert!(!Phase::MalfunctionOff.serves(m(North, Through)));
        assert!(Phase::Index(0).serves(m(North, Through)));
        assert!(!Phase::Index(0).serves(m(East, Through)));
    }
}
