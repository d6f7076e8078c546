//! Binary little-endian PLY with float32 vertices and uint32 face indices.

use std::io::{self, BufRead, Read, Write};

use super::Mesh;

pub fn write_ply<W: Write>(mesh: &Mesh, mut out: W) -> io::Result<()> {
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar uint vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.triangles.len()
    );
    let mut buf = Vec::with_capacity(header.len() + mesh.vertices.len() * 12 + mesh.triangles.len() * 13);
    buf.extend_from_slice(header.as_bytes());
    for v in &mesh.vertices {
        for c in v {
            buf.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    for t in &mesh.triangles {
        buf.push(3);
        for i in t {
            buf.extend_from_slice(&i.to_le_bytes());
        }
    }
    out.write_all(&buf)
}

fn bad(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

/// Reads files produced by [`write_ply`].
pub fn read_ply<R: Read>(input: R) -> io::Result<Mesh> {
    let mut r = io::BufReader::new(input);
    let mut line = String::new();
    let (mut nv, mut nf) = (None, None);
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("unterminated header"));
        }
        let t = line.trim_end();
        if t == "end_header" {
            break;
        }
        let parts: Vec<&str> = t.split_whitespace().collect();
        match parts.as_slice() {
            ["format", fmt, _] if *fmt != "binary_little_endian" => return Err(bad(format!("unsupported format {fmt}"))),
            ["element", "vertex", n] => nv = Some(n.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            ["element", "face", n] => nf = Some(n.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            _ => {}
        }
    }
    let (nv, nf) = (nv.ok_or_else(|| bad("missing vertex count"))?, nf.ok_or_else(|| bad("missing face count"))?);
    let mut mesh = Mesh { vertices: Vec::with_capacity(nv), triangles: Vec::with_capacity(nf) };
    let mut f4 = [0u8; 4];
    for _ in 0..nv {
        let mut v = [0.0; 3];
        for c in &mut v {
            r.read_exact(&mut f4)?;
            *c = f64::from(f32::from_le_bytes(f4));
        }
        mesh.vertices.push(v);
    }
    for _ in 0..nf {
        let mut n = [0u8; 1];
        r.read_exact(&mut n)?;
        if n[0] != 3 {
            return Err(bad("only triangles are supported"));
        }
        let mut t = [0u32; 3];
        for i in &mut t {
            r.read_exact(&mut f4)?;
            *i = u32::from_le_bytes(f4);
        }
        mesh.triangles.push(t);
    }
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mesh = Mesh { vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.5], [0.0, 1.0, -2.25]], triangles: vec![[0, 1, 2]] };
        let mut buf = Vec::new();
        write_ply(&mesh, &mut buf).unwrap();
        assert!(buf.starts_with(b"ply\nformat binary_little_endian 1.0\n"));
        assert_eq!(read_ply(&buf[..]).unwrap(), mesh);
    }
}
