use std::time::Duration;

use thiserror::Error;

use super::{Cluster, ClusterError, ContainerState, NetworkPolicy};
use crate::clock::SimTime;
use crate::kv::{KvEntry, KvError, Watch, WatchEvent};
use crate::metadata::{MetadataError, MetadataStore};
use crate::objects::ObjectError;
use crate::stores::Stores;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnvError {
    #[error("ACCESS_DENIED: {0}")]
    Denied(String),
    #[error("volume {0} is not mounted")]
    NoVolume(String),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Meta(#[from] MetadataError),
    #[error(transparent)]
    Obj(#[from] ObjectError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

/// What a payload sees while running one step.
///
/// Pods attached to a network policy are confined: only their mounted
/// volumes, buckets of the policy's tenant and coordination keys under
/// `/jobs/{owner}/`. They get no metadata or cluster access at all. Until the
/// policy exists every outside access is refused.
pub struct Env<'a> {
    cluster: &'a mut Cluster,
    stores: &'a Stores,
    pod: String,
    container: usize,
    extra: Duration,
}

impl<'a> Env<'a> {
    pub(super) fn new(cluster: &'a mut Cluster, stores: &'a Stores, pod: String, container: usize) -> Self {
        Env { cluster, stores, pod, container, extra: Duration::ZERO }
    }

    pub(super) fn extra_delay(&self) -> Duration {
        self.extra
    }

    fn pod(&self) -> &super::Pod {
        &self.cluster.pods[&self.pod]
    }

    pub fn now(&self) -> SimTime {
        self.cluster.now()
    }

    pub fn pod_name(&self) -> &str {
        &self.pod
    }

    pub fn container_name(&self) -> &str {
        &self.pod().containers[self.container].name
    }

    pub fn replica_index(&self) -> Option<u32> {
        self.pod().replica_index
    }

    /// Times this pod (or, for tasks, this task) has been restarted.
    pub fn restart_count(&self) -> u32 {
        self.pod().restarts
    }

    pub fn owner(&self) -> String {
        self.cluster.units[&self.pod().unit].owner.clone()
    }

    /// Appends a line to the cluster event log targeting this container.
    pub fn log_event(&mut self, kind: &str, detail: impl Into<String>) {
        let target = format!("container:{}/{}", self.pod, self.container_name());
        self.cluster.record(kind, target, detail);
    }

    /// Delays the next step by `d` on top of what the payload returns.
    pub fn add_delay(&mut self, d: Duration) {
        self.extra += d;
    }

    /// Consumes a pending `fail` fault aimed at this container.
    pub fn take_injected_failure(&mut self) -> Option<i32> {
        let pod = self.cluster.pods.get_mut(&self.pod)?;
        let c = &mut pod.containers[self.container];
        debug_assert_eq!(c.state, ContainerState::Running);
        c.injected_failure.take()
    }

    fn policy(&self) -> Result<Option<&NetworkPolicy>, EnvError> {
        match &self.pod().network_policy {
            None => Ok(None),
            Some(id) => self
                .cluster
                .policies
                .get(id)
                .map(Some)
                .ok_or_else(|| EnvError::Denied(format!("policy {id} not in force"))),
        }
    }

    fn check_kv_key(&self, key: &str) -> Result<(), EnvError> {
        if let Some(policy) = self.policy()? {
            let allowed = format!("/jobs/{}/", policy.owner);
            if !key.starts_with(&allowed) {
                return Err(EnvError::Denied(format!("key {key}")));
            }
        }
        Ok(())
    }

    fn check_bucket(&self, bucket: &str) -> Result<(), EnvError> {
        if let Some(policy) = self.policy()? {
            let tenant = self.stores.objects.bucket_tenant(bucket)?;
            if tenant.as_deref() != Some(policy.tenant.as_str()) {
                return Err(EnvError::Denied(format!("bucket {bucket}")));
            }
        }
        Ok(())
    }

    fn check_unconfined(&self, what: &str) -> Result<(), EnvError> {
        match self.pod().network_policy {
            Some(_) => Err(EnvError::Denied(what.to_string())),
            None => Ok(()),
        }
    }

    // Shared volumes

    fn check_mount(&self, volume: &str) -> Result<(), EnvError> {
        if self.pod().volumes.iter().any(|v| v == volume) && self.cluster.volumes.contains_key(volume) {
            Ok(())
        } else {
            Err(EnvError::NoVolume(volume.to_string()))
        }
    }

    pub fn vol_read(&self, volume: &str, path: &str) -> Result<Option<Vec<u8>>, EnvError> {
        self.check_mount(volume)?;
        Ok(self.cluster.volumes[volume].files.get(path).cloned())
    }

    /// Replaces the whole file.
    pub fn vol_write(&mut self, volume: &str, path: &str, bytes: impl Into<Vec<u8>>) -> Result<(), EnvError> {
        self.check_mount(volume)?;
        let vol = self.cluster.volumes.get_mut(volume).expect("checked");
        vol.files.insert(path.to_string(), bytes.into());
        Ok(())
    }

    pub fn vol_append(&mut self, volume: &str, path: &str, bytes: &[u8]) -> Result<(), EnvError> {
        self.check_mount(volume)?;
        let vol = self.cluster.volumes.get_mut(volume).expect("checked");
        vol.files.entry(path.to_string()).or_default().extend_from_slice(bytes);
        Ok(())
    }

    pub fn vol_list(&self, volume: &str, prefix: &str) -> Result<Vec<String>, EnvError> {
        self.check_mount(volume)?;
        Ok(self.cluster.volumes[volume]
            .files
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect())
    }

    // Coordination store

    pub fn kv_put(&mut self, key: &str, value: impl Into<Vec<u8>>) -> Result<u64, EnvError> {
        self.check_kv_key(key)?;
        Ok(self.stores.kv.put(key, value)?)
    }

    pub fn kv_get(&self, key: &str) -> Result<KvEntry, EnvError> {
        self.check_kv_key(key)?;
        Ok(self.stores.kv.get(key)?)
    }

    pub fn kv_delete(&mut self, key: &str) -> Result<u64, EnvError> {
        self.check_kv_key(key)?;
        Ok(self.stores.kv.delete(key)?)
    }

    pub fn kv_range(&self, prefix: &str) -> Result<Vec<KvEntry>, EnvError> {
        self.check_kv_key(prefix)?;
        Ok(self.stores.kv.range(prefix)?)
    }

    pub fn kv_revision(&self) -> Result<u64, EnvError> {
        Ok(self.stores.kv.current_revision()?)
    }

    pub fn kv_watch(&self, prefix: &str, from: u64) -> Result<Watch, EnvError> {
        self.check_kv_key(prefix)?;
        Ok(self.stores.kv.watch(prefix, from)?)
    }

    pub fn kv_poll(&self, watch: &mut Watch) -> Result<Vec<WatchEvent>, EnvError> {
        self.check_kv_key(&watch.prefix)?;
        Ok(self.stores.kv.poll(watch)?)
    }

    // Object store

    pub fn obj_put(&mut self, bucket: &str, cred: &str, key: &str, bytes: &[u8]) -> Result<u64, EnvError> {
        self.check_bucket(bucket)?;
        Ok(self.stores.objects.put_object(bucket, cred, key, bytes)?)
    }

    /// Reads an object; the bucket's simulated transfer time is added to
    /// this step's delay.
    pub fn obj_get(&mut self, bucket: &str, cred: &str, key: &str) -> Result<Vec<u8>, EnvError> {
        self.check_bucket(bucket)?;
        let bytes = self.stores.objects.get_object(bucket, cred, key)?;
        self.extra += self.stores.objects.read_cost(bucket, bytes.len());
        Ok(bytes)
    }

    pub fn obj_list(&self, bucket: &str, cred: &str, prefix: &str) -> Result<Vec<String>, EnvError> {
        self.check_bucket(bucket)?;
        Ok(self.stores.objects.list_objects(bucket, cred, prefix)?)
    }

    // Control-plane access, refused to confined pods

    pub fn metadata(&self) -> Result<&MetadataStore, EnvError> {
        self.check_unconfined("metadata store")?;
        Ok(&self.stores.metadata)
    }

    pub fn cluster(&mut self) -> Result<&mut Cluster, EnvError> {
        self.check_unconfined("cluster api")?;
        Ok(self.cluster)
    }
}
